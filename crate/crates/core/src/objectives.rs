//! Alignment and token-prediction objectives, and the cross-modal decoder
//! that feeds token prediction.

use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{normal_mat, AttentionParams, BlockParams, LayerNormParams, LinearParams};
use crate::tape::{AttnLayout, Graph, Mat, NodeId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for SdmConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            epsilon: 1e-8,
        }
    }
}

impl SdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "tau and epsilon must be positive, got {} and {}",
                self.tau, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Identity key of each sample. Two samples match when their keys are equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchLabels {
    pub pair_ids: Vec<String>,
}

impl MatchLabels {
    pub fn new<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Self {
        Self {
            pair_ids: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

fn unit_rows(x: &Mat) -> Result<Mat> {
    let mut out = x.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("embedding row {i} has norm {n}")));
        }
        row /= n;
    }
    Ok(out)
}

fn softmax_rows(mut z: Mat) -> Mat {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

/// Row softmax of `cos(anchor_i, other_j) / τ`.
pub fn predicted_distribution(anchors: &Mat, others: &Mat, tau: f64) -> Result<Mat> {
    if anchors.ncols() != others.ncols() {
        return Err(Error::Shape(format!(
            "embedding widths {} and {}",
            anchors.ncols(),
            others.ncols()
        )));
    }
    if anchors.nrows() == 0 || others.nrows() == 0 {
        return Err(Error::Degenerate("empty embedding batch".into()));
    }
    let a = unit_rows(anchors)?;
    let b = unit_rows(others)?;
    Ok(softmax_rows(a.dot(&b.t()) / tau))
}

/// `q[i, j] = [row_i = col_j] / Σ_k [row_i = col_k]`
pub fn ground_truth_distribution(rows: &MatchLabels, cols: &MatchLabels) -> Result<Mat> {
    let mut q = Mat::zeros((rows.len(), cols.len()));
    for (i, a) in rows.pair_ids.iter().enumerate() {
        let hits: Vec<usize> = cols
            .pair_ids
            .iter()
            .enumerate()
            .filter(|(_, b)| *b == a)
            .map(|(j, _)| j)
            .collect();
        if hits.is_empty() {
            return Err(Error::Label(format!("row {i} ({a}) has no positive in the batch")));
        }
        let w = 1.0 / hits.len() as f64;
        for j in hits {
            q[[i, j]] = w;
        }
    }
    Ok(q)
}

/// `(1/B) Σ_i Σ_j p_ij log(p_ij / (q_ij + ε))`, with `B` the row count.
pub fn kl_matching(p: &Mat, q: &Mat, epsilon: f64) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("p {:?} vs q {:?}", p.dim(), q.dim())));
    }
    let mut total = 0.0;
    for (&pij, &qij) in p.iter().zip(q) {
        if pij > 0.0 {
            total += pij * (pij.ln() - (qij + epsilon).ln());
        }
    }
    Ok(total / p.nrows() as f64)
}

/// Predicted and target distributions in both retrieval directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SdmDistributions {
    pub p_i2t: Mat,
    pub q_i2t: Mat,
    pub p_t2i: Mat,
    pub q_t2i: Mat,
}

impl SdmDistributions {
    pub fn new(
        v_cls: &Mat,
        t_eos: &Mat,
        image_labels: &MatchLabels,
        text_labels: &MatchLabels,
        tau: f64,
    ) -> Result<Self> {
        if v_cls.nrows() != image_labels.len() || t_eos.nrows() != text_labels.len() {
            return Err(Error::Alignment(format!(
                "{} images / {} labels, {} captions / {} labels",
                v_cls.nrows(),
                image_labels.len(),
                t_eos.nrows(),
                text_labels.len()
            )));
        }
        Ok(Self {
            p_i2t: predicted_distribution(v_cls, t_eos, tau)?,
            q_i2t: ground_truth_distribution(image_labels, text_labels)?,
            p_t2i: predicted_distribution(t_eos, v_cls, tau)?,
            q_t2i: ground_truth_distribution(text_labels, image_labels)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdmLosses {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_sdm: f64,
}

pub fn sdm_loss(d: &SdmDistributions, epsilon: f64) -> Result<SdmLosses> {
    let l_i2t = kl_matching(&d.p_i2t, &d.q_i2t, epsilon)?;
    let l_t2i = kl_matching(&d.p_t2i, &d.q_t2i, epsilon)?;
    Ok(SdmLosses {
        l_i2t,
        l_t2i,
        l_sdm: l_i2t + l_t2i,
    })
}

/// Graph nodes of the symmetric matching loss.
#[derive(Clone, Copy, Debug)]
pub struct SdmNodes {
    pub l_i2t: NodeId,
    pub l_t2i: NodeId,
    pub l_sdm: NodeId,
}

/// Records the matching loss on `g` for raw (unnormalized) global embeddings.
pub fn sdm_graph(
    g: &mut Graph<'_>,
    v_cls: NodeId,
    t_eos: NodeId,
    image_labels: &MatchLabels,
    text_labels: &MatchLabels,
    cfg: &SdmConfig,
) -> Result<SdmNodes> {
    let q_i2t = ground_truth_distribution(image_labels, text_labels)?;
    let q_t2i = ground_truth_distribution(text_labels, image_labels)?;
    let v = g.row_normalize(v_cls)?;
    let t = g.row_normalize(t_eos)?;
    let sim = g.matmul_nt(v, t);
    let z = g.scale(sim, 1.0 / cfg.tau);
    let l_i2t = g.sdm_kl(z, &q_i2t, cfg.epsilon)?;
    let sim = g.matmul_nt(t, v);
    let z = g.scale(sim, 1.0 / cfg.tau);
    let l_t2i = g.sdm_kl(z, &q_t2i, cfg.epsilon)?;
    let l_sdm = g.axpby(l_i2t, 1.0, l_t2i, 1.0);
    Ok(SdmNodes {
        l_i2t,
        l_t2i,
        l_sdm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub cross_attn_heads: usize,
    /// Self-attention layers after the cross-attention.
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Output vocabulary size.
    pub vocab_size: usize,
    /// `true` divides the token-prediction loss by `|M|` instead of `|M|·|V|`.
    pub conventional_ce: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            cross_attn_heads: 4,
            depth: 4,
            mlp_ratio: 4,
            vocab_size: 512,
            conventional_ce: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.depth != 4 {
            return Err(Error::Config(format!("decoder depth must be 4, got {}", self.depth)));
        }
        if self.cross_attn_heads == 0 || width % self.cross_attn_heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {} heads",
                self.cross_attn_heads
            )));
        }
        if self.vocab_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab_size and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Prediction head: dense, QuickGELU, layer norm, vocabulary projection.
#[derive(Clone, Copy, Debug)]
pub struct MlmHead {
    pub dense: LinearParams,
    pub ln: LayerNormParams,
    pub out: LinearParams,
}

/// Cross-attention from text positions onto image tokens, followed by a
/// stack of bidirectional self-attention blocks over the text positions.
#[derive(Clone, Debug)]
pub struct CrossModalDecoder {
    pub config: DecoderConfig,
    pub width: usize,
    pub ln_text: LayerNormParams,
    pub ln_image: LayerNormParams,
    pub cross: AttentionParams,
    pub blocks: Vec<BlockParams>,
    pub ln_post: LayerNormParams,
    pub head: MlmHead,
}

impl CrossModalDecoder {
    pub fn new(
        config: DecoderConfig,
        width: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(width)?;
        let std = (width as f64).powf(-0.5);
        let blocks = (0..config.depth)
            .map(|i| {
                BlockParams::register(
                    store,
                    &format!("decoder.blocks.{i}"),
                    width,
                    config.mlp_ratio,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let head = MlmHead {
            dense: LinearParams::register(store, "decoder.head.dense", width, width, std, true, rng),
            ln: LayerNormParams::register(store, "decoder.head.ln", width),
            out: LinearParams::register(
                store,
                "decoder.head.out",
                width,
                config.vocab_size,
                std,
                true,
                rng,
            ),
        };
        Ok(Self {
            width,
            ln_text: LayerNormParams::register(store, "decoder.ln_text", width),
            ln_image: LayerNormParams::register(store, "decoder.ln_image", width),
            cross: AttentionParams::register(store, "decoder.cross", width, std, rng),
            blocks,
            ln_post: LayerNormParams::register(store, "decoder.ln_post", width),
            head,
            config,
        })
    }

    /// Fuses a padded text batch (`batch·seq_len × d`, valid lengths in
    /// `lengths`) with image tokens (`batch·per_image × d`).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        text: NodeId,
        seq_len: usize,
        lengths: &[usize],
        image: NodeId,
        per_image: usize,
    ) -> Result<NodeId> {
        let (tv, iv) = (g.value(text), g.value(image));
        if tv.ncols() != self.width || iv.ncols() != self.width {
            return Err(Error::Shape(format!(
                "decoder width {} but text has {} and image has {} columns",
                self.width,
                tv.ncols(),
                iv.ncols()
            )));
        }
        let batch = lengths.len();
        let q = self.ln_text.forward(g, text);
        let kv = self.ln_image.forward(g, image);
        let cross = AttnLayout {
            batch,
            q_len: seq_len,
            k_len: per_image,
            heads: self.config.cross_attn_heads,
            key_valid: vec![per_image; batch],
            causal: false,
        };
        let mut x = self.cross.forward(g, q, kv, cross)?.out;
        let layout = AttnLayout {
            batch,
            q_len: seq_len,
            k_len: seq_len,
            heads: self.config.cross_attn_heads,
            key_valid: lengths.to_vec(),
            causal: false,
        };
        for block in &self.blocks {
            x = block.forward(g, x, layout.clone())?.out;
        }
        Ok(self.ln_post.forward(g, x))
    }

    /// Vocabulary logits for the given rows of a fused hidden batch.
    pub fn logits(&self, g: &mut Graph<'_>, fused: NodeId, rows: Vec<usize>) -> NodeId {
        let h = g.gather_rows(fused, rows);
        let h = self.head.dense.forward(g, h);
        let h = g.quick_gelu(h);
        let h = self.head.ln.forward(g, h);
        self.head.out.forward(g, h)
    }

    /// Per-sample convenience wrapper around [`Self::forward`]. Text samples
    /// may differ in length; every image must carry the same token count.
    pub fn cross_modal_decode(
        &self,
        params: &ParamStore,
        masked_text_hidden: &[Mat],
        image_tokens: &[Mat],
    ) -> Result<Vec<Mat>> {
        if masked_text_hidden.len() != image_tokens.len() || masked_text_hidden.is_empty() {
            return Err(Error::Alignment(format!(
                "{} text samples and {} image samples",
                masked_text_hidden.len(),
                image_tokens.len()
            )));
        }
        let d = self.width;
        let per = image_tokens[0].nrows();
        if let Some(m) = masked_text_hidden
            .iter()
            .chain(image_tokens)
            .find(|m| m.ncols() != d)
        {
            return Err(Error::Shape(format!("expected width {d}, got {}", m.ncols())));
        }
        if per == 0 || image_tokens.iter().any(|m| m.nrows() != per) {
            return Err(Error::Shape("image token counts differ or are zero".into()));
        }
        let lengths: Vec<usize> = masked_text_hidden.iter().map(|m| m.nrows()).collect();
        if lengths.contains(&0) {
            return Err(Error::Shape("empty text sample".into()));
        }
        let seq_len = *lengths.iter().max().expect("non-empty");
        let mut text = Mat::zeros((lengths.len() * seq_len, d));
        for (b, m) in masked_text_hidden.iter().enumerate() {
            text.slice_mut(s![b * seq_len..b * seq_len + m.nrows(), ..]).assign(m);
        }
        let mut image = Mat::zeros((lengths.len() * per, d));
        for (b, m) in image_tokens.iter().enumerate() {
            image.slice_mut(s![b * per..(b + 1) * per, ..]).assign(m);
        }
        let mut g = Graph::new(params);
        let text = g.leaf(text);
        let image = g.leaf(image);
        let fused = self.forward(&mut g, text, seq_len, &lengths, image, per)?;
        let out = g.value(fused);
        Ok(lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| out.slice(s![b * seq_len..b * seq_len + n, ..]).to_owned())
            .collect())
    }
}

/// Divisor of the summed negative log-likelihood.
pub fn mtp_normalizer(masked: usize, vocab: usize, conventional_ce: bool) -> f64 {
    if conventional_ce {
        masked as f64
    } else {
        (masked * vocab) as f64
    }
}

/// `−(1/(|M|·|V|)) Σ_{j∈M} log softmax(logits_j)[y_j]`, or `/|M|` with
/// `conventional_ce`. Zero when `M` is empty.
pub fn mtp_loss(logits: &Mat, targets: &[u32], conventional_ce: bool) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary { id: t, vocab });
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut nll = 0.0;
    for (row, &t) in logits.axis_iter(Axis(0)).zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[t as usize];
    }
    Ok(nll / mtp_normalizer(targets.len(), vocab, conventional_ce))
}

pub fn total_loss(l_sdm: f64, l_mtp: f64, beta: f64) -> f64 {
    l_sdm + beta * l_mtp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_sdm: f64,
    pub l_mtp: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(sdm: SdmLosses, l_mtp: f64, beta: f64) -> Self {
        Self {
            l_i2t: sdm.l_i2t,
            l_t2i: sdm.l_t2i,
            l_sdm: sdm.l_sdm,
            l_mtp,
            beta,
            total: total_loss(sdm.l_sdm, l_mtp, beta),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_i2t, self.l_t2i, self.l_sdm, self.l_mtp, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Small random decoder inputs, used by tests and benchmarks.
pub fn random_tokens(rng: &mut impl Rng, rows: usize, width: usize) -> Mat {
    normal_mat(rng, rows, width, 1.0)
}
