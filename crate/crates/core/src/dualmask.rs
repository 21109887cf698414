//! Score-driven masking of caption tokens.
//!
//! Two sigmoid laws turn a normalized token score `s ∈ [0, 1]` into masking
//! probabilities: low-scoring (likely noisy) tokens are masked to suppress
//! them, high-scoring (informative) tokens are masked to become prediction
//! targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::gass::GassScores;
use crate::seeding::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Ceiling of the noise-masking probability.
    pub alpha_n: f64,
    /// Ceiling of the informative-masking probability.
    pub alpha_i: f64,
    /// Sigmoid slope.
    pub lambda: f64,
    /// Sigmoid midpoint.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            alpha_n: 0.2,
            alpha_i: 0.3,
            lambda: 10.0,
            gamma: 0.5,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha_n) || !unit.contains(&self.alpha_i) {
            return Err(Error::Config(format!(
                "mask ceilings must lie in [0, 1]: alpha_n={} alpha_i={}",
                self.alpha_n, self.alpha_i
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !unit.contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// True when neither mechanism can ever fire.
    pub fn is_disabled(&self) -> bool {
        self.alpha_n == 0.0 && self.alpha_i == 0.0
    }
}

/// `α_n / (1 + exp(−λ[(1 − s) − γ]))`
pub fn noise_mask_prob(s: f64, cfg: &MaskConfig) -> f64 {
    cfg.alpha_n / (1.0 + (-cfg.lambda * ((1.0 - s) - cfg.gamma)).exp())
}

/// `α_i / (1 + exp(−λ[s − γ]))`
pub fn informative_mask_prob(s: f64, cfg: &MaskConfig) -> f64 {
    cfg.alpha_i / (1.0 + (-cfg.lambda * (s - cfg.gamma)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionProbability {
    pub position: usize,
    pub noise: f64,
    pub informative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Positions masked to suppress them, ascending.
    pub noise_positions: Vec<usize>,
    /// Positions masked as prediction targets, ascending.
    pub informative_positions: Vec<usize>,
    /// Positions drawn by both laws; they are listed as informative.
    pub double_selected: Vec<usize>,
    pub probabilities: Vec<PositionProbability>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.noise_positions.is_empty() && self.informative_positions.is_empty()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.noise_positions
            .iter()
            .chain(&self.informative_positions)
            .copied()
    }
}

/// Samples a plan with an explicit generator. Every unprotected position
/// consumes exactly two uniform draws (noise first), so the stream layout
/// does not depend on the probabilities.
pub fn sample_mask_with(
    scores: &GassScores,
    seq: &TokenSequence,
    cfg: &MaskConfig,
    rng: &mut impl Rng,
) -> Result<MaskPlan> {
    if scores.normalized.len() != seq.ids().len() {
        return Err(Error::Alignment(format!(
            "{} scores for {} token positions",
            scores.normalized.len(),
            seq.ids().len()
        )));
    }
    let mut plan = MaskPlan::default();
    for pos in seq.content_positions() {
        let s = scores.normalized[pos];
        let p_noise = noise_mask_prob(s, cfg);
        let p_info = informative_mask_prob(s, cfg);
        let noise = rng.random::<f64>() < p_noise;
        let info = rng.random::<f64>() < p_info;
        plan.probabilities.push(PositionProbability {
            position: pos,
            noise: p_noise,
            informative: p_info,
        });
        match (noise, info) {
            (true, true) => {
                plan.double_selected.push(pos);
                plan.informative_positions.push(pos);
            }
            (false, true) => plan.informative_positions.push(pos),
            (true, false) => plan.noise_positions.push(pos),
            (false, false) => {}
        }
    }
    Ok(plan)
}

/// Samples a plan on the stream derived from `(cfg.seed, step, sample)`.
pub fn sample_mask(
    scores: &GassScores,
    seq: &TokenSequence,
    cfg: &MaskConfig,
    step: u64,
    sample: u64,
) -> Result<MaskPlan> {
    let mut rng = stream_rng(cfg.seed, Stream::Mask, step, sample);
    sample_mask_with(scores, seq, cfg, &mut rng)
}

/// Replaces every planned position with `mask_id`.
pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan, mask_id: u32) -> Result<TokenSequence> {
    for pos in plan.masked_positions() {
        if pos >= seq.ids().len() || seq.is_protected(pos) {
            return Err(Error::ProtectedPosition(pos));
        }
    }
    Ok(seq.replaced(plan.masked_positions(), mask_id))
}

/// One line of the optional mask audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAuditRecord {
    pub step: u64,
    pub sample: usize,
    pub pair_id: String,
    pub plan: MaskPlan,
}
