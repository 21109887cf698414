//! Gradient-attention similarity scoring of caption tokens.
//!
//! For each of the final `L` text layers the score combines
//!
//! * a spatial importance `w` (softmax of the `<eos>` query against
//!   multi-scale pooled keys),
//! * a gradient score `s_g[i] = w[i] · ⟨g, v[i]⟩` where `g` is the gradient of
//!   the matched-pair cosine similarity with respect to the layer's `<eos>`
//!   output and `v[i]` the token's value vector,
//! * an attention score `s_a` (head-averaged `<eos>` attention row,
//!   renormalized),
//!
//! fused as `S = ReLU(mean_l s_g · s_a)` and min-max normalized per caption.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, ImagePatchGrid, LayerTrace, ProbeOutput, TokenSequence};
use crate::error::{Error, Result};
use crate::tape::{Mat, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GassConfig {
    /// Number of final text layers aggregated.
    pub layers: usize,
    /// Pooling window sizes of the multi-scale pooling step.
    pub scales: Vec<usize>,
}

impl GassConfig {
    /// `ceil(2/3 · depth)` final layers with scales `[1, 2]`.
    pub fn for_depth(depth: usize) -> Self {
        Self {
            layers: (2 * depth).div_ceil(3).max(1),
            scales: vec![1, 2],
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.layers == 0 || self.layers > depth {
            return Err(Error::Config(format!(
                "GASS layer count {} must lie in [1, {depth}]",
                self.layers
            )));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!(
                "pooling scales {:?} must be non-empty and positive",
                self.scales
            )));
        }
        Ok(())
    }

    /// Indices of the aggregated layers.
    pub fn layer_indices(&self, depth: usize) -> Vec<usize> {
        (depth - self.layers..depth).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub w: Vec<f64>,
    pub s_g: Vec<f64>,
    pub s_a: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GassScores {
    /// Fused non-negative score per position; zero on padding.
    pub fused: Vec<f64>,
    /// Min-max normalized score in `[0, 1]` per position; zero outside the
    /// caption content.
    pub normalized: Vec<f64>,
}

/// Multi-scale pooling along the token axis.
///
/// For each scale `c`, non-overlapping windows of `c` tokens are averaged
/// (the last window is completed by repeating the final token), then the
/// pooled sequence is linearly interpolated back to `N` positions with
/// aligned endpoints. Results of all scales are averaged.
pub fn msp(features: ArrayView2<'_, f64>, scales: &[usize]) -> Result<Mat> {
    let (n, d) = features.dim();
    if n == 0 {
        return Err(Error::Degenerate("multi-scale pooling of an empty sequence".into()));
    }
    if scales.is_empty() || scales.contains(&0) {
        return Err(Error::Config(format!("invalid pooling scales {scales:?}")));
    }
    let mut out = Mat::zeros((n, d));
    for &c in scales {
        let pooled_len = n.div_ceil(c);
        let mut pooled = Mat::zeros((pooled_len, d));
        for (j, mut row) in pooled.axis_iter_mut(Axis(0)).enumerate() {
            for t in j * c..j * c + c {
                row += &features.row(t.min(n - 1));
            }
            row /= c as f64;
        }
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            if pooled_len == 1 || n == 1 {
                row += &pooled.row(0);
                continue;
            }
            let x = (i * (pooled_len - 1)) as f64 / (n - 1) as f64;
            let lo = x.floor() as usize;
            let frac = x - lo as f64;
            if frac == 0.0 {
                row += &pooled.row(lo);
            } else {
                row.scaled_add(1.0 - frac, &pooled.row(lo));
                row.scaled_add(frac, &pooled.row(lo + 1));
            }
        }
    }
    if scales.len() > 1 {
        out /= scales.len() as f64;
    }
    Ok(out)
}

/// `w = softmax(MSP(q_eos) · MSP(k)ᵀ)` over the token axis. `q_eos` is a
/// single position, so its pooling is the identity.
pub fn spatial_importance(q_eos: &[f64], k: ArrayView2<'_, f64>, scales: &[usize]) -> Result<Vec<f64>> {
    if k.nrows() == 0 {
        return Err(Error::Degenerate("no valid key positions".into()));
    }
    if q_eos.len() != k.ncols() {
        return Err(Error::Shape(format!(
            "query width {} vs key width {}",
            q_eos.len(),
            k.ncols()
        )));
    }
    let q = ndarray::ArrayView2::from_shape((1, q_eos.len()), q_eos).expect("row view");
    let q = msp(q, scales)?;
    let k = msp(k, scales)?;
    let logits = k.dot(&q.row(0));
    Ok(softmax(logits.as_slice().expect("contiguous")))
}

/// `s_g[i] = w[i] · ⟨g, v[i]⟩`
pub fn gradient_score(g: &[f64], w: &[f64], v: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if v.nrows() != w.len() || v.ncols() != g.len() {
        return Err(Error::Shape(format!(
            "gradient {} / weights {} / values {:?}",
            g.len(),
            w.len(),
            v.dim()
        )));
    }
    let g = ndarray::ArrayView1::from(g);
    Ok(v.rows()
        .into_iter()
        .zip(w)
        .map(|(row, wi)| wi * row.dot(&g))
        .collect())
}

/// Head-averaged attention row of the `<eos>` position, renormalized to sum
/// to one.
pub fn attention_score(attn: &[Mat], eos_position: usize) -> Result<Vec<f64>> {
    let first = attn
        .first()
        .ok_or_else(|| Error::Degenerate("no attention heads".into()))?;
    let n = first.ncols();
    if eos_position >= first.nrows() {
        return Err(Error::Index {
            index: eos_position,
            bound: first.nrows(),
        });
    }
    let mut row = vec![0.0; n];
    for head in attn {
        if head.ncols() != n || head.nrows() <= eos_position {
            return Err(Error::Shape("attention heads disagree in shape".into()));
        }
        for (acc, v) in row.iter_mut().zip(head.row(eos_position)) {
            *acc += v;
        }
    }
    for v in &mut row {
        *v /= attn.len() as f64;
    }
    let total: f64 = row.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate(format!("eos attention sums to {total}")));
    }
    Ok(row.into_iter().map(|v| v / total).collect())
}

/// `S[i] = ReLU((1/L) Σ_l s_g^l[i] · s_a^l[i])`
pub fn fuse_scores(s_g: &[Vec<f64>], s_a: &[Vec<f64>], layers: usize) -> Result<Vec<f64>> {
    if layers == 0 || s_g.len() != layers || s_a.len() != layers {
        return Err(Error::Config(format!(
            "expected {layers} layer entries, got {} gradient and {} attention",
            s_g.len(),
            s_a.len()
        )));
    }
    let n = s_g[0].len();
    if s_g.iter().chain(s_a).any(|v| v.len() != n) {
        return Err(Error::Shape("per-layer scores differ in length".into()));
    }
    let mut fused = vec![0.0; n];
    for (g, a) in s_g.iter().zip(s_a) {
        for ((f, gi), ai) in fused.iter_mut().zip(g).zip(a) {
            *f += gi * ai;
        }
    }
    Ok(fused
        .into_iter()
        .map(|f| (f / layers as f64).max(0.0))
        .collect())
}

/// Min-max normalization over the positions selected by `mask`. A constant
/// selection maps to 0.5; unselected positions map to 0.
pub fn normalize_scores(fused: &[f64], mask: &[bool]) -> Vec<f64> {
    let selected = fused.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v);
    let (lo, hi) = selected.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    fused
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m {
                0.0
            } else if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        })
        .collect()
}

/// Per-layer scores for one caption from its trace and probed gradient.
pub fn layer_scores(trace: &LayerTrace, g: &[f64], eos_position: usize, scales: &[usize]) -> Result<LayerScores> {
    let w = spatial_importance(&trace.q_eos, trace.k.view(), scales)?;
    let s_g = gradient_score(g, &w, trace.v.view())?;
    let s_a = attention_score(&trace.attn, eos_position)?;
    Ok(LayerScores { w, s_g, s_a })
}

/// Scores every caption of a batch of matched pairs against its image.
/// The result is detached from the model: it is plain data.
pub fn score_pairs(
    encoder: &DualEncoder,
    params: &ParamStore,
    texts: &[&TokenSequence],
    images: &[&ImagePatchGrid],
    cfg: &GassConfig,
) -> Result<Vec<GassScores>> {
    cfg.validate(encoder.config.depth)?;
    let layers = cfg.layer_indices(encoder.config.depth);
    let probe = encoder.probe(params, texts, images, &layers, 1.0)?;
    scores_from_probe(&probe, texts, cfg)
}

/// Like [`score_pairs`], against image embeddings already computed.
pub fn score_against(
    encoder: &DualEncoder,
    params: &ParamStore,
    texts: &[&TokenSequence],
    v_cls: &Mat,
    cfg: &GassConfig,
) -> Result<Vec<GassScores>> {
    cfg.validate(encoder.config.depth)?;
    let layers = cfg.layer_indices(encoder.config.depth);
    let probe = encoder.probe_against(params, texts, v_cls, &layers, 1.0)?;
    scores_from_probe(&probe, texts, cfg)
}

/// Turns a probing pass into per-caption scores.
pub fn scores_from_probe(
    probe: &ProbeOutput,
    texts: &[&TokenSequence],
    cfg: &GassConfig,
) -> Result<Vec<GassScores>> {
    texts
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            let eos = seq.eos_position();
            let mut s_g = Vec::with_capacity(cfg.layers);
            let mut s_a = Vec::with_capacity(cfg.layers);
            for (trace, g) in probe.traces[b].iter().zip(&probe.probes[b].g) {
                let ls = layer_scores(trace, g, eos, &cfg.scales)?;
                s_g.push(ls.s_g);
                s_a.push(ls.s_a);
            }
            let mut fused = fuse_scores(&s_g, &s_a, cfg.layers)?;
            fused.resize(seq.ids().len(), 0.0);
            let content: Vec<bool> = (0..seq.ids().len())
                .map(|i| !seq.is_protected(i))
                .collect();
            let normalized = normalize_scores(&fused, &content);
            Ok(GassScores { fused, normalized })
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
