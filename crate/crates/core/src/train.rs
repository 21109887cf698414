//! Training loop: probe, score, mask, align, predict, update.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Corpus, Split, SyntheticPair};
use crate::dualmask::{apply_mask, sample_mask_with, MaskAuditRecord, MaskConfig, MaskPlan};
use crate::encoder::{ImagePass, ImagePatchGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::gass::{score_against, GassConfig, GassScores};
use crate::jsonl;
use crate::model::{Model, ModelConfig};
use crate::objectives::{mtp_normalizer, sdm_graph, LossReport, MatchLabels, SdmConfig, SdmLosses};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::retrieval::{cosine_scores, report, MetricsReport, ScoreMatrix};
use crate::seeding::{stream_rng, Stream};
use crate::tape::{Graph, Mat, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub gass: GassConfig,
    pub mask: MaskConfig,
    pub sdm: SdmConfig,
    pub beta: f64,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Recompute token scores for a caption at most every this many steps.
    pub score_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let gass = GassConfig::for_depth(model.encoder.depth);
        Self {
            model,
            gass,
            mask: MaskConfig::default(),
            sdm: SdmConfig::default(),
            beta: 0.4,
            lr: 1e-4,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 64,
            seed: 0,
            score_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gass.validate(self.model.encoder.depth)?;
        self.mask.validate()?;
        self.sdm.validate()?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must lie in [0, lr]");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.score_every == 0 {
            return bad("score_every must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        let [b1, b2] = self.adam.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.adam.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self, n: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(n);
        LrSchedule {
            base: self.lr,
            min: self.lr_min,
            warmup_steps: spe * self.warmup_epochs as u64,
            total_steps: spe * self.epochs as u64,
        }
    }
}

/// Tokenized captions, rendered images and identity labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seqs: Vec<TokenSequence>,
    pub images: Vec<ImagePatchGrid>,
    pub labels: Vec<String>,
    /// Known noisy token positions per caption, when available.
    pub noise_truth: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_pairs(corpus: &Corpus, pairs: &[SyntheticPair]) -> Result<Self> {
        let specials = corpus.specials()?;
        let mut out = Dataset {
            seqs: Vec::with_capacity(pairs.len()),
            images: Vec::with_capacity(pairs.len()),
            labels: Vec::with_capacity(pairs.len()),
            noise_truth: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            out.seqs.push(p.sequence(&specials)?);
            out.images.push(p.image(corpus.spec()));
            out.labels.push(p.pair_id.clone());
            out.noise_truth.push(p.noise_truth.clone());
        }
        Ok(out)
    }

    pub fn from_corpus(corpus: &Corpus, split: Split) -> Result<Self> {
        Self::from_pairs(corpus, corpus.split(split))
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn max_token_id(&self) -> Option<u32> {
        self.seqs.iter().flat_map(|s| s.ids().iter().copied()).max()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub noise_masked: usize,
    pub informative_masked: usize,
}

/// Mean normalized score over known noisy and clean content positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeparation {
    pub noise_mean: f64,
    pub clean_mean: f64,
    pub noise_count: usize,
    pub clean_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_sdm: f64,
    pub mean_mtp: f64,
    pub separation: Option<ScoreSeparation>,
    pub eval: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Cached token scores of one caption and the step they were computed at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedScores {
    pub step: u64,
    pub scores: GassScores,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Next optimizer step.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: History,
    pub score_cache: Vec<Option<CachedScores>>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.adam.clone(), &model.params);
        Ok(Self {
            model,
            adam,
            step: 0,
            epoch: 0,
            history: History::default(),
            score_cache: vec![None; train_len],
        })
    }
}

/// Outputs of one step besides the parameter update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub plans: Vec<MaskPlan>,
    /// Scores computed afresh this step, by position in the batch.
    pub fresh_scores: Vec<Option<GassScores>>,
}

fn check_batch(data: &Dataset, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Index {
            index: i,
            bound: data.len(),
        });
    }
    Ok(())
}

/// One optimization step in the fixed order: image forward and unmasked
/// probe, score-driven masking, masked text forward, matching loss on the
/// masked view, cross-modal token prediction on informative positions,
/// backward and update.
pub fn train_step(
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    check_batch(data, batch)?;
    let step = state.step;
    let model = &state.model;
    let texts: Vec<&TokenSequence> = batch.iter().map(|&i| &data.seqs[i]).collect();
    let images: Vec<&ImagePatchGrid> = batch.iter().map(|&i| &data.images[i]).collect();
    let labels = MatchLabels::new(batch.iter().map(|&i| data.labels[i].clone()));

    let mut g = Graph::new(&model.params);
    let ip = model.encoder.image_forward(&mut g, &images)?;

    // (1) scores from an unmasked pass against detached image embeddings
    let stale: Vec<usize> = (0..batch.len())
        .filter(|&b| match &state.score_cache[batch[b]] {
            Some(c) => step - c.step >= cfg.score_every,
            None => true,
        })
        .collect();
    let mut fresh_scores = vec![None; batch.len()];
    if !stale.is_empty() {
        let v_cls = g.value(ip.cls).select(ndarray::Axis(0), &stale);
        let sub: Vec<&TokenSequence> = stale.iter().map(|&b| texts[b]).collect();
        let scores = score_against(&model.encoder, &model.params, &sub, &v_cls, &cfg.gass)?;
        for (b, s) in stale.into_iter().zip(scores) {
            fresh_scores[b] = Some(s);
        }
    }
    let scores: Vec<&GassScores> = (0..batch.len())
        .map(|b| match &fresh_scores[b] {
            Some(s) => s,
            None => &state.score_cache[batch[b]].as_ref().expect("cached").scores,
        })
        .collect();

    // (2) masking
    let mask_id = model.config.encoder.special_ids.mask;
    let mut plans = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    for (b, &i) in batch.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, Stream::Mask, step, i as u64);
        let plan = sample_mask_with(scores[b], texts[b], &cfg.mask, &mut rng)?;
        masked.push(apply_mask(texts[b], &plan, mask_id)?);
        plans.push(plan);
    }

    let (total, report) = masked_losses(&mut g, model, ip, &texts, &masked, &plans, &labels, cfg, step)?;

    // (6) update
    let grads = g.backward(total).into_params();
    drop(g);
    state.adam.step(&mut state.model.params, grads, lr)?;
    state.step += 1;
    for (b, s) in fresh_scores.iter().enumerate() {
        if let Some(s) = s {
            state.score_cache[batch[b]] = Some(CachedScores {
                step,
                scores: s.clone(),
            });
        }
    }
    Ok(StepOutcome {
        report,
        plans,
        fresh_scores,
    })
}

#[allow(clippy::too_many_arguments)]
fn masked_losses(
    g: &mut Graph,
    model: &Model,
    ip: ImagePass,
    texts: &[&TokenSequence],
    masked: &[TokenSequence],
    plans: &[MaskPlan],
    labels: &MatchLabels,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(NodeId, LossReport)> {
    // (3) masked forward, (4) matching loss on the masked view
    let masked_refs: Vec<&TokenSequence> = masked.iter().collect();
    let tp = model.encoder.text_forward(g, &masked_refs, None)?;
    let sdm = sdm_graph(g, ip.cls, tp.eos, labels, labels, &cfg.sdm)?;

    // (5) token prediction on informative positions
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        for &pos in &plan.informative_positions {
            rows.push(tp.row(b, pos));
            targets.push(texts[b].ids()[pos] as usize);
        }
    }
    let (total, mtp) = if rows.is_empty() {
        (sdm.l_sdm, None)
    } else {
        let fused = model.decoder.forward(
            g,
            tp.tokens,
            tp.seq_len,
            &tp.lengths,
            ip.tokens,
            ip.tokens_per_image,
        )?;
        let logits = model.decoder.logits(g, fused, rows);
        let norm = mtp_normalizer(
            targets.len(),
            model.config.decoder.vocab_size,
            model.config.decoder.conventional_ce,
        );
        let ce = g.cross_entropy(logits, targets, norm)?;
        (g.axpby(sdm.l_sdm, 1.0, ce, cfg.beta), Some(ce))
    };
    let losses = SdmLosses {
        l_i2t: g.scalar(sdm.l_i2t),
        l_t2i: g.scalar(sdm.l_t2i),
        l_sdm: g.scalar(sdm.l_sdm),
    };
    let mut report = LossReport::new(losses, mtp.map_or(0.0, |n| g.scalar(n)), cfg.beta);
    report.total = g.scalar(total);
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{report:?}"),
        });
    }
    Ok((total, report))
}

/// Loss and parameter gradients of one step under fixed mask plans, with no
/// scoring and no update.
pub fn step_loss(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    plans: &[MaskPlan],
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<Option<Mat>>)> {
    check_batch(data, batch)?;
    if plans.len() != batch.len() {
        return Err(Error::Alignment(format!(
            "{} mask plans for a batch of {}",
            plans.len(),
            batch.len()
        )));
    }
    let texts: Vec<&TokenSequence> = batch.iter().map(|&i| &data.seqs[i]).collect();
    let images: Vec<&ImagePatchGrid> = batch.iter().map(|&i| &data.images[i]).collect();
    let labels = MatchLabels::new(batch.iter().map(|&i| data.labels[i].clone()));
    let mask_id = model.config.encoder.special_ids.mask;
    let masked = texts
        .iter()
        .zip(plans)
        .map(|(t, p)| apply_mask(t, p, mask_id))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(&model.params);
    let ip = model.encoder.image_forward(&mut g, &images)?;
    let (total, report) = masked_losses(&mut g, model, ip, &texts, &masked, plans, &labels, cfg, 0)?;
    Ok((report, g.backward(total).into_params()))
}

/// Plain matching-loss step on unmasked captions, with no scoring and no
/// token prediction.
pub fn baseline_step(
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    check_batch(data, batch)?;
    let model = &state.model;
    let texts: Vec<&TokenSequence> = batch.iter().map(|&i| &data.seqs[i]).collect();
    let images: Vec<&ImagePatchGrid> = batch.iter().map(|&i| &data.images[i]).collect();
    let labels = MatchLabels::new(batch.iter().map(|&i| data.labels[i].clone()));
    let mut g = Graph::new(&model.params);
    let ip = model.encoder.image_forward(&mut g, &images)?;
    let tp = model.encoder.text_forward(&mut g, &texts, None)?;
    let sdm = sdm_graph(&mut g, ip.cls, tp.eos, &labels, &labels, &cfg.sdm)?;
    let losses = SdmLosses {
        l_i2t: g.scalar(sdm.l_i2t),
        l_t2i: g.scalar(sdm.l_t2i),
        l_sdm: g.scalar(sdm.l_sdm),
    };
    let report = LossReport::new(losses, 0.0, cfg.beta);
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("{report:?}"),
        });
    }
    let grads = g.backward(sdm.l_sdm).into_params();
    drop(g);
    state.adam.step(&mut state.model.params, grads, lr)?;
    state.step += 1;
    Ok(report)
}

/// Batch composition of `epoch`: a seeded permutation cut into chunks.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Shuffle, epoch as u64, 0);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Global embeddings of a whole split, encoded in chunks.
pub fn embed(model: &Model, data: &Dataset, chunk: usize) -> Result<(Mat, Mat)> {
    let d = model.config.encoder.width;
    let mut t = Mat::zeros((data.len(), d));
    let mut v = Mat::zeros((data.len(), d));
    let chunk = chunk.max(1);
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let texts: Vec<&TokenSequence> = data.seqs[start..end].iter().collect();
        let images: Vec<&ImagePatchGrid> = data.images[start..end].iter().collect();
        let e = model.encoder.encode_batch(&model.params, &texts, &images)?;
        t.slice_mut(ndarray::s![start..end, ..]).assign(&e.t_eos);
        v.slice_mut(ndarray::s![start..end, ..]).assign(&e.v_cls);
    }
    Ok((t, v))
}

/// Caption-to-image retrieval over a split: every caption queries the
/// gallery of all images; relevance is label equality.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty evaluation split".into()));
    }
    if let Some(id) = data.max_token_id() {
        if id as usize >= model.config.encoder.vocab_size {
            return Err(Error::Compatibility(format!(
                "token id {id} exceeds the model vocabulary of {}",
                model.config.encoder.vocab_size
            )));
        }
    }
    let (t, v) = embed(model, data, 64)?;
    let m = ScoreMatrix::from_ids(cosine_scores(&t, &v)?, &data.labels, &data.labels)?;
    report(&m)
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Per-epoch checkpoints go to `<dir>/epoch-NNNN`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Step and epoch records, rewritten from the restored history on start.
    pub metrics_path: Option<PathBuf>,
    /// One JSON line per caption per step.
    pub mask_audit_path: Option<PathBuf>,
    /// Stop after this many completed epochs (for interruption tests).
    pub stop_after_epoch: Option<usize>,
    /// Evaluate on the test split after every epoch, not just the last.
    pub eval_every_epoch: bool,
    /// Fingerprint of the vocabulary, stored in checkpoints.
    pub vocab_sha256: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

fn write_metrics(path: &std::path::Path, history: &History) -> Result<()> {
    let mut lines = Vec::new();
    let mut steps = history.steps.iter().peekable();
    for e in &history.epochs {
        while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
            lines.push(MetricsLine::Step(s.clone()));
        }
        lines.push(MetricsLine::Epoch(e.clone()));
    }
    lines.extend(steps.map(|s| MetricsLine::Step(s.clone())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    jsonl::write(path, &lines)
}

fn separation_update(acc: &mut (f64, usize, f64, usize), scores: &GassScores, seq: &TokenSequence, noise: &[usize]) {
    for pos in seq.content_positions() {
        let s = scores.normalized[pos];
        if noise.contains(&pos) {
            acc.0 += s;
            acc.1 += 1;
        } else {
            acc.2 += s;
            acc.3 += 1;
        }
    }
}

/// Runs (or continues) training until `cfg.epochs` are complete.
pub fn fit(
    state: &mut TrainState,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Degenerate("empty training split".into()));
    }
    if state.score_cache.len() != train.len() {
        return Err(Error::Compatibility(format!(
            "score cache holds {} captions but the training split has {}",
            state.score_cache.len(),
            train.len()
        )));
    }
    if let Some(id) = train.max_token_id() {
        if id as usize >= cfg.model.encoder.vocab_size {
            return Err(Error::Compatibility(format!(
                "token id {id} exceeds the model vocabulary of {}",
                cfg.model.encoder.vocab_size
            )));
        }
    }
    if let Some(p) = &opts.metrics_path {
        write_metrics(p, &state.history)?;
    }
    let schedule = cfg.schedule(train.len());
    let stop = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    while state.epoch < stop {
        let epoch = state.epoch;
        let mut sums = (0.0, 0.0, 0.0);
        let mut sep = (0.0, 0, 0.0, 0);
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let n_batches = batches.len();
        for batch in batches {
            let step = state.step;
            let lr = schedule.lr(step);
            let out = train_step(state, train, &batch, cfg, lr)?;
            let noise_masked = out.plans.iter().map(|p| p.noise_positions.len()).sum();
            let informative_masked = out.plans.iter().map(|p| p.informative_positions.len()).sum();
            for (b, s) in out.fresh_scores.iter().enumerate() {
                if let Some(s) = s {
                    let i = batch[b];
                    separation_update(&mut sep, s, &train.seqs[i], &train.noise_truth[i]);
                }
            }
            if let Some(path) = &opts.mask_audit_path {
                for (b, plan) in out.plans.into_iter().enumerate() {
                    jsonl::append(
                        path,
                        &MaskAuditRecord {
                            step,
                            sample: batch[b],
                            pair_id: train.labels[batch[b]].clone(),
                            plan,
                        },
                    )?;
                }
            }
            sums.0 += out.report.total;
            sums.1 += out.report.l_sdm;
            sums.2 += out.report.l_mtp;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: out.report,
                noise_masked,
                informative_masked,
            };
            if let Some(p) = &opts.metrics_path {
                jsonl::append(p, &MetricsLine::Step(rec.clone()))?;
            }
            state.history.steps.push(rec);
        }
        let last = epoch + 1 == cfg.epochs;
        let eval = match test {
            Some(t) if last || opts.eval_every_epoch => Some(evaluate(&state.model, t)?),
            _ => None,
        };
        let n = n_batches as f64;
        let record = EpochRecord {
            epoch,
            steps: n_batches,
            mean_total: sums.0 / n,
            mean_sdm: sums.1 / n,
            mean_mtp: sums.2 / n,
            separation: (sep.1 > 0 && sep.3 > 0).then(|| ScoreSeparation {
                noise_mean: sep.0 / sep.1 as f64,
                clean_mean: sep.2 / sep.3 as f64,
                noise_count: sep.1,
                clean_count: sep.3,
            }),
            eval,
        };
        log::info!(
            "epoch {} mean loss {:.5} (sdm {:.5}, mtp {:.5})",
            epoch + 1,
            record.mean_total,
            record.mean_sdm,
            record.mean_mtp
        );
        if let Some(p) = &opts.metrics_path {
            jsonl::append(p, &MetricsLine::Epoch(record.clone()))?;
        }
        state.history.epochs.push(record);
        state.epoch += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            let path = checkpoint::epoch_dir(dir, state.epoch);
            checkpoint::save(&path, state, cfg, opts.vocab_sha256.as_deref())?;
        }
    }
    Ok(state.history.clone())
}
