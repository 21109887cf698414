//! Miniature CLIP-style dual encoder with per-layer trace capture and
//! intermediate-gradient probing.
//!
//! The text tower is a causal pre-norm transformer whose sequence summary is
//! the `<eos>` position; the image tower is a bidirectional transformer over
//! patch tokens with a leading class token. Both project into a shared
//! `width`-dimensional space.

use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{normal_mat, BlockNodes, BlockParams, LayerNormParams, LinearParams};
use crate::tape::{AttnLayout, Graph, Mat, NodeId, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub sos: u32,
    pub eos: u32,
    pub mask: u32,
    pub pad: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        Self {
            sos: 0,
            eos: 1,
            mask: 2,
            pad: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Maximum number of token positions, `<sos>` and `<eos>` included.
    pub max_text_len: usize,
    /// Patch rows × patch columns.
    pub image_grid: [usize; 2],
    /// Side length in pixels of a square RGB patch.
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub special_ids: SpecialIds,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            vocab_size: 512,
            max_text_len: 32,
            image_grid: [8, 4],
            patch_size: 4,
            mlp_ratio: 4,
            special_ids: SpecialIds::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.max_text_len < 3 {
            return fail(format!("max_text_len {} < 3", self.max_text_len));
        }
        if self.image_grid.contains(&0) || self.patch_size == 0 || self.mlp_ratio == 0 {
            return fail("image grid, patch size and mlp ratio must be positive".into());
        }
        let sp = self.special_ids;
        let ids = [sp.sos, sp.eos, sp.mask, sp.pad];
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.vocab_size {
                return fail(format!("special id {a} outside vocabulary {}", self.vocab_size));
            }
            if ids[i + 1..].contains(a) {
                return fail(format!("special id {a} used twice"));
            }
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn num_patches(&self) -> usize {
        self.image_grid[0] * self.image_grid[1]
    }

    /// Image tokens including the class token.
    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }
}

/// A tokenized caption: `<sos> content… <eos>` optionally followed by `<pad>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    valid_mask: Vec<bool>,
    length: usize,
}

impl TokenSequence {
    /// Validates an explicit id list (which may carry trailing padding).
    pub fn new(ids: Vec<u32>, specials: &SpecialIds) -> Result<Self> {
        let length = ids
            .iter()
            .position(|&t| t == specials.pad)
            .unwrap_or(ids.len());
        if length < 2 {
            return Err(Error::Sequence(format!(
                "need at least <sos> and <eos>, got {length} valid tokens"
            )));
        }
        if ids[0] != specials.sos {
            return Err(Error::Sequence("position 0 is not <sos>".into()));
        }
        if ids[length - 1] != specials.eos {
            return Err(Error::Sequence("last valid position is not <eos>".into()));
        }
        if let Some(i) = ids[length..].iter().position(|&t| t != specials.pad) {
            return Err(Error::Sequence(format!(
                "non-pad token after padding at position {}",
                length + i
            )));
        }
        if let Some(i) = ids[1..length - 1]
            .iter()
            .position(|&t| t == specials.sos || t == specials.eos)
        {
            return Err(Error::Sequence(format!(
                "special token inside content at position {}",
                i + 1
            )));
        }
        let valid_mask = (0..ids.len()).map(|i| i < length).collect();
        Ok(Self {
            ids,
            valid_mask,
            length,
        })
    }

    /// Wraps content ids as `<sos> content <eos>`.
    pub fn from_content(content: &[u32], specials: &SpecialIds, max_len: usize) -> Result<Self> {
        if content.len() + 2 > max_len {
            return Err(Error::Length {
                len: content.len() + 2,
                max: max_len,
            });
        }
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(specials.sos);
        ids.extend_from_slice(content);
        ids.push(specials.eos);
        Self::new(ids, specials)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid_mask
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn eos_position(&self) -> usize {
        self.length - 1
    }

    /// Positions strictly between `<sos>` and `<eos>`.
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.length - 1
    }

    /// `<sos>`, `<eos>` and padding may never be masked.
    pub fn is_protected(&self, pos: usize) -> bool {
        pos == 0 || pos >= self.length - 1
    }

    pub(crate) fn replaced(&self, positions: impl IntoIterator<Item = usize>, id: u32) -> Self {
        let mut out = self.clone();
        for p in positions {
            out.ids[p] = id;
        }
        out
    }
}

/// Row-major grid of flattened RGB patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    data: Vec<f64>,
}

impl ImagePatchGrid {
    pub fn new(rows: usize, cols: usize, patch_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * patch_dim {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} grid of {patch_dim}-dim patches",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            patch_dim,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, patch_dim: usize) -> Self {
        Self {
            rows,
            cols,
            patch_dim,
            data: vec![0.0; rows * cols * patch_dim],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.patch_dim;
        &self.data[start..start + self.patch_dim]
    }
}

/// Quantities captured from one text-encoder layer for a single caption,
/// restricted to its valid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Post-softmax attention map per head, `length × length`.
    pub attn: Vec<Mat>,
    pub q_eos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    /// Projected per-token embeddings over valid positions.
    pub tokens: Mat,
    pub eos: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    /// Projected embeddings, class token first.
    pub tokens: Mat,
    pub cls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub text_tokens: Vec<Mat>,
    pub t_eos: Mat,
    pub v_cls: Mat,
}

impl EmbeddingBatch {
    pub fn batch_size(&self) -> usize {
        self.t_eos.nrows()
    }
}

/// `∂SIM/∂T_eos^l` for each probed layer of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientProbe {
    pub layers: Vec<usize>,
    pub g: Vec<Vec<f64>>,
}

/// Additive offset injected into one residual-stream entry after a layer.
/// Used by finite-difference checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    pub layer: usize,
    pub sample: usize,
    pub row: usize,
    pub coord: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    pub proj: LinearParams,
}

#[derive(Clone, Debug)]
pub struct ImageTower {
    pub patch: LinearParams,
    pub pos_emb: ParamId,
    pub ln_pre: LayerNormParams,
    pub blocks: Vec<BlockParams>,
    pub ln_post: LayerNormParams,
    pub proj: LinearParams,
}

/// Node handles of one batched text forward pass.
#[derive(Clone, Debug)]
pub struct TextPass {
    /// Padded length shared by every sample of the batch.
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    pub blocks: Vec<BlockNodes>,
    /// Residual stream after each block (`batch·seq_len × width`).
    pub layer_outputs: Vec<NodeId>,
    pub tokens: NodeId,
    pub eos: NodeId,
}

impl TextPass {
    pub fn row(&self, sample: usize, pos: usize) -> usize {
        sample * self.seq_len + pos
    }

    pub fn eos_row(&self, sample: usize) -> usize {
        self.row(sample, self.lengths[sample] - 1)
    }
}

#[derive(Clone, Debug)]
pub struct ImagePass {
    pub tokens_per_image: usize,
    pub tokens: NodeId,
    pub cls: NodeId,
}

/// Everything a single probing pass produces.
#[derive(Clone, Debug)]
pub struct ProbeOutput {
    pub probes: Vec<GradientProbe>,
    /// `traces[b][j]` belongs to sample `b` and the `j`-th requested layer.
    pub traces: Vec<Vec<LayerTrace>>,
    pub similarities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub text: TextTower,
    pub image: ImageTower,
}

impl DualEncoder {
    /// Registers freshly initialized weights for both towers in `store`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let depth = config.depth;
        let text = TextTower {
            tok_emb: store.insert("text.tok_emb", normal_mat(rng, config.vocab_size, d, 0.02)),
            pos_emb: store.insert("text.pos_emb", normal_mat(rng, config.max_text_len, d, 0.01)),
            blocks: (0..depth)
                .map(|i| {
                    BlockParams::register(store, &format!("text.blocks.{i}"), d, config.mlp_ratio, depth, rng)
                })
                .collect(),
            ln_final: LayerNormParams::register(store, "text.ln_final", d),
            proj: LinearParams::register(store, "text.proj", d, d, (d as f64).powf(-0.5), false, rng),
        };
        let image = ImageTower {
            patch: LinearParams::register(
                store,
                "image.patch",
                config.patch_dim(),
                d,
                (config.patch_dim() as f64).powf(-0.5),
                true,
                rng,
            ),
            pos_emb: store.insert("image.pos_emb", normal_mat(rng, config.image_tokens(), d, 0.02)),
            ln_pre: LayerNormParams::register(store, "image.ln_pre", d),
            blocks: (0..depth)
                .map(|i| {
                    BlockParams::register(store, &format!("image.blocks.{i}"), d, config.mlp_ratio, depth, rng)
                })
                .collect(),
            ln_post: LayerNormParams::register(store, "image.ln_post", d),
            proj: LinearParams::register(store, "image.proj", d, d, (d as f64).powf(-0.5), false, rng),
        };
        Ok(Self {
            config,
            text,
            image,
        })
    }

    pub fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let max = self.config.max_text_len;
        if seq.length() > max {
            return Err(Error::Length {
                len: seq.length(),
                max,
            });
        }
        if let Some(&id) = seq.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn check_image(&self, img: &ImagePatchGrid) -> Result<()> {
        let [rows, cols] = self.config.image_grid;
        if img.rows != rows || img.cols != cols || img.patch_dim != self.config.patch_dim() {
            return Err(Error::Shape(format!(
                "image grid {}x{}x{} does not match configured {rows}x{cols}x{}",
                img.rows,
                img.cols,
                img.patch_dim,
                self.config.patch_dim()
            )));
        }
        Ok(())
    }

    /// Builds the batched text forward pass. Samples are padded to the
    /// longest valid length in the batch; padding keys are masked.
    pub fn text_forward(
        &self,
        g: &mut Graph<'_>,
        seqs: &[&TokenSequence],
        perturb: Option<&Perturbation>,
    ) -> Result<TextPass> {
        if seqs.is_empty() {
            return Err(Error::Degenerate("empty text batch".into()));
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let cfg = &self.config;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.length()).collect();
        let seq_len = *lengths.iter().max().expect("non-empty batch");
        let pad = cfg.special_ids.pad as usize;
        let rows: Vec<usize> = seqs
            .iter()
            .flat_map(|s| (0..seq_len).map(move |i| if i < s.length() { s.ids()[i] as usize } else { pad }))
            .collect();

        let tok = g.param(self.text.tok_emb);
        let x = g.gather_rows(tok, rows);
        let pos = g.param(self.text.pos_emb);
        let pos = g.gather_rows(pos, (0..seq_len).collect());
        let mut x = g.add_tiled(x, pos);

        let layout = AttnLayout {
            batch: seqs.len(),
            q_len: seq_len,
            k_len: seq_len,
            heads: cfg.heads,
            key_valid: lengths.clone(),
            causal: true,
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut layer_outputs = Vec::with_capacity(cfg.depth);
        for (l, block) in self.text.blocks.iter().enumerate() {
            let nodes = block.forward(g, x, layout.clone())?;
            x = nodes.out;
            if let Some(p) = perturb.filter(|p| p.layer == l) {
                let mut delta = Mat::zeros((seqs.len() * seq_len, cfg.width));
                delta[[p.sample * seq_len + p.row, p.coord]] = p.delta;
                let delta = g.leaf(delta);
                x = g.add(x, delta);
            }
            blocks.push(nodes);
            layer_outputs.push(x);
        }
        let h = self.text.ln_final.forward(g, x);
        let tokens = self.text.proj.forward(g, h);
        let eos_rows = lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| b * seq_len + n - 1)
            .collect();
        let eos = g.gather_rows(tokens, eos_rows);
        Ok(TextPass {
            seq_len,
            lengths,
            blocks,
            layer_outputs,
            tokens,
            eos,
        })
    }

    /// Builds the batched image forward pass. The class-token slot enters as
    /// a zero patch, so its input embedding is the patch bias plus its own
    /// position embedding.
    pub fn image_forward(&self, g: &mut Graph<'_>, images: &[&ImagePatchGrid]) -> Result<ImagePass> {
        if images.is_empty() {
            return Err(Error::Degenerate("empty image batch".into()));
        }
        for img in images {
            self.check_image(img)?;
        }
        let cfg = &self.config;
        let per = cfg.image_tokens();
        let pd = cfg.patch_dim();
        let mut input = Mat::zeros((images.len() * per, pd));
        for (b, img) in images.iter().enumerate() {
            for (p, patch) in img.data().chunks(pd).enumerate() {
                input
                    .row_mut(b * per + 1 + p)
                    .assign(&ndarray::ArrayView1::from(patch));
            }
        }
        let input = g.leaf(input);
        let x = self.image.patch.forward(g, input);
        let pos = g.param(self.image.pos_emb);
        let x = g.add_tiled(x, pos);
        let mut x = self.image.ln_pre.forward(g, x);
        let layout = AttnLayout {
            batch: images.len(),
            q_len: per,
            k_len: per,
            heads: cfg.heads,
            key_valid: vec![per; images.len()],
            causal: false,
        };
        for block in &self.image.blocks {
            x = block.forward(g, x, layout.clone())?.out;
        }
        let h = self.image.ln_post.forward(g, x);
        let tokens = self.image.proj.forward(g, h);
        let cls = g.gather_rows(tokens, (0..images.len()).map(|b| b * per).collect());
        Ok(ImagePass {
            tokens_per_image: per,
            tokens,
            cls,
        })
    }

    /// Copies the captured quantities of `layer` for `sample` out of a graph.
    pub fn trace(&self, g: &Graph<'_>, pass: &TextPass, sample: usize, layer: usize) -> LayerTrace {
        let nodes = &pass.blocks[layer].attn;
        let n = pass.lengths[sample];
        let rows = pass.row(sample, 0)..pass.row(sample, n);
        let take = |id: NodeId| g.value(id).slice(s![rows.clone(), ..]).to_owned();
        let q = take(nodes.q);
        let (layout, probs) = g.attention_probs(nodes.attn).expect("attention node");
        let attn = (0..layout.heads)
            .map(|h| {
                probs[sample * layout.heads + h]
                    .slice(s![0..n, 0..n])
                    .to_owned()
            })
            .collect();
        let q_eos = q.row(n - 1).to_vec();
        LayerTrace {
            layer_index: layer,
            k: take(nodes.k),
            v: take(nodes.v),
            q,
            attn,
            q_eos,
        }
    }

    /// Encodes one caption. With `capture`, returns one trace per layer.
    pub fn encode_text(
        &self,
        params: &ParamStore,
        seq: &TokenSequence,
        capture: bool,
    ) -> Result<(TextEmbedding, Vec<LayerTrace>)> {
        let mut g = Graph::new(params);
        let pass = self.text_forward(&mut g, &[seq], None)?;
        let n = seq.length();
        let tokens = g.value(pass.tokens).slice(s![0..n, ..]).to_owned();
        let eos = g.value(pass.eos).row(0).to_vec();
        let traces = if capture {
            (0..self.config.depth)
                .map(|l| self.trace(&g, &pass, 0, l))
                .collect()
        } else {
            Vec::new()
        };
        Ok((TextEmbedding { tokens, eos }, traces))
    }

    pub fn encode_image(&self, params: &ParamStore, img: &ImagePatchGrid) -> Result<ImageEmbedding> {
        let mut g = Graph::new(params);
        let pass = self.image_forward(&mut g, &[img])?;
        let tokens = g.value(pass.tokens).to_owned();
        let cls = tokens.row(0).to_vec();
        Ok(ImageEmbedding { tokens, cls })
    }

    /// Global embeddings for a batch of captions and images (not necessarily
    /// the same count).
    pub fn encode_batch(
        &self,
        params: &ParamStore,
        texts: &[&TokenSequence],
        images: &[&ImagePatchGrid],
    ) -> Result<EmbeddingBatch> {
        let mut g = Graph::new(params);
        let tp = self.text_forward(&mut g, texts, None)?;
        let ip = self.image_forward(&mut g, images)?;
        let tok = g.value(tp.tokens);
        let text_tokens = tp
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| tok.slice(s![b * tp.seq_len..b * tp.seq_len + n, ..]).to_owned())
            .collect();
        Ok(EmbeddingBatch {
            text_tokens,
            t_eos: g.value(tp.eos).to_owned(),
            v_cls: g.value(ip.cls).to_owned(),
        })
    }

    /// Matched-pair cosine similarity per sample, optionally with a residual
    /// perturbation applied inside the text tower.
    pub fn matched_similarities(
        &self,
        params: &ParamStore,
        texts: &[&TokenSequence],
        images: &[&ImagePatchGrid],
        perturb: Option<&Perturbation>,
    ) -> Result<Vec<f64>> {
        check_pairs(texts.len(), images.len())?;
        let mut g = Graph::new(params);
        let tp = self.text_forward(&mut g, texts, perturb)?;
        let ip = self.image_forward(&mut g, images)?;
        let t = g.value(tp.eos);
        let v = g.value(ip.cls);
        t.rows()
            .into_iter()
            .zip(v.rows())
            .map(|(a, b)| global_similarity(a.as_slice().unwrap(), b.as_slice().unwrap()))
            .collect()
    }

    /// `g^l = ∂SIM_b/∂T_eos^l` for every sample `b` and requested layer `l`.
    pub fn probe_intermediate_gradients(
        &self,
        params: &ParamStore,
        texts: &[&TokenSequence],
        images: &[&ImagePatchGrid],
        layers: &[usize],
    ) -> Result<Vec<GradientProbe>> {
        Ok(self.probe(params, texts, images, layers, 1.0)?.probes)
    }

    /// One unmasked forward pass with trace capture followed by a backward
    /// pass of `sim_scale · Σ_b SIM_b` to the requested layer outputs. The
    /// image side is detached, and no parameter gradients are formed.
    pub fn probe(
        &self,
        params: &ParamStore,
        texts: &[&TokenSequence],
        images: &[&ImagePatchGrid],
        layers: &[usize],
        sim_scale: f64,
    ) -> Result<ProbeOutput> {
        check_pairs(texts.len(), images.len())?;
        let mut g = Graph::new(params);
        let ip = self.image_forward(&mut g, images)?;
        let v_cls = g.value(ip.cls).to_owned();
        self.probe_against(params, texts, &v_cls, layers, sim_scale)
    }

    /// [`Self::probe`] against precomputed image embeddings `v_cls`
    /// (one row per caption, treated as constants).
    pub fn probe_against(
        &self,
        params: &ParamStore,
        texts: &[&TokenSequence],
        v_cls: &Mat,
        layers: &[usize],
        sim_scale: f64,
    ) -> Result<ProbeOutput> {
        check_pairs(texts.len(), v_cls.nrows())?;
        if let Some(&l) = layers.iter().find(|&&l| l >= self.config.depth) {
            return Err(Error::Index {
                index: l,
                bound: self.config.depth,
            });
        }
        let mut g = Graph::new(params);
        let tp = self.text_forward(&mut g, texts, None)?;

        let mut v_cls = v_cls.clone();
        for (b, mut row) in v_cls.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("image {b} has zero-norm embedding")));
            }
            row /= n;
        }
        let v_cls = g.leaf(v_cls);
        let t_eos = g.row_normalize(tp.eos)?;
        let sim_sum = g.inner(t_eos, v_cls);
        let root = g.scale(sim_sum, sim_scale);

        let similarities = (&g.value(t_eos) * &g.value(v_cls))
            .sum_axis(Axis(1))
            .to_vec();
        let targets: Vec<NodeId> = layers.iter().map(|&l| tp.layer_outputs[l]).collect();
        let grads = g.backward_to(root, &targets);

        let width = self.config.width;
        let mut probes = Vec::with_capacity(texts.len());
        let mut traces = Vec::with_capacity(texts.len());
        for b in 0..texts.len() {
            let row = tp.eos_row(b);
            let g_l = targets
                .iter()
                .map(|&t| match grads.node(t) {
                    Some(m) => m.row(row).to_vec(),
                    None => vec![0.0; width],
                })
                .collect();
            probes.push(GradientProbe {
                layers: layers.to_vec(),
                g: g_l,
            });
            traces.push(layers.iter().map(|&l| self.trace(&g, &tp, b, l)).collect());
        }
        Ok(ProbeOutput {
            probes,
            traces,
            similarities,
        })
    }
}

fn check_pairs(texts: usize, images: usize) -> Result<()> {
    if texts != images {
        return Err(Error::Alignment(format!(
            "{texts} captions paired with {images} images"
        )));
    }
    Ok(())
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn global_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
