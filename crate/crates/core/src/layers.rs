//! Transformer building blocks shared by the encoders and the decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tape::{AttnLayout, Graph, Mat, NodeId, ParamId, ParamStore};

pub(crate) fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{prefix}.gamma"), Mat::ones((1, width))),
            beta: store.insert(format!("{prefix}.beta"), Mat::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert(
            format!("{prefix}.weight"),
            normal_mat(rng, fan_in, fan_out, std),
        );
        let bias = bias.then(|| store.insert(format!("{prefix}.bias"), Mat::zeros((1, fan_out))));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let h = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(h, b)
            }
            None => h,
        }
    }
}

/// Multi-head attention projections. Queries may come from a different
/// sequence than keys and values (cross-attention).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

/// Intermediate nodes of one attention call, kept for trace capture.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub attn: NodeId,
    pub out: NodeId,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (width as f64).powf(-0.5);
        Self {
            q: LinearParams::register(store, &format!("{prefix}.q"), width, width, std, true, rng),
            k: LinearParams::register(store, &format!("{prefix}.k"), width, width, std, true, rng),
            v: LinearParams::register(store, &format!("{prefix}.v"), width, width, std, true, rng),
            out: LinearParams::register(
                store,
                &format!("{prefix}.out"),
                width,
                width,
                out_std,
                true,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query_in: NodeId,
        kv_in: NodeId,
        layout: AttnLayout,
    ) -> Result<AttentionNodes> {
        let q = self.q.forward(g, query_in);
        let k = self.k.forward(g, kv_in);
        let v = self.v.forward(g, kv_in);
        let attn = g.attention(q, k, v, layout)?;
        let out = self.out.forward(g, attn);
        Ok(AttentionNodes {
            q,
            k,
            v,
            attn,
            out,
        })
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub attn: AttentionNodes,
    pub out: NodeId,
}

impl BlockParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        mlp_ratio: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = width * mlp_ratio;
        // residual branches are shrunk with depth so the stream variance stays bounded
        let out_std = (width as f64).powf(-0.5) / (2.0 * depth as f64).sqrt();
        Self {
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), width),
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), width, out_std, rng),
            ln2: LayerNormParams::register(store, &format!("{prefix}.ln2"), width),
            fc1: LinearParams::register(
                store,
                &format!("{prefix}.fc1"),
                width,
                hidden,
                (width as f64).powf(-0.5),
                true,
                rng,
            ),
            fc2: LinearParams::register(
                store,
                &format!("{prefix}.fc2"),
                hidden,
                width,
                (hidden as f64).powf(-0.5) / (2.0 * depth as f64).sqrt(),
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, layout: AttnLayout) -> Result<BlockNodes> {
        let h = self.ln1.forward(g, x);
        let attn = self.attn.forward(g, h, h, layout)?;
        let x = g.add(x, attn.out);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.quick_gelu(h);
        let h = self.fc2.forward(g, h);
        let out = g.add(x, h);
        Ok(BlockNodes { attn, out })
    }
}
