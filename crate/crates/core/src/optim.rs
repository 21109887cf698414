//! Adam with L2 weight decay, and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    /// Coefficient of the L2 term added to every gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            eps: 1e-3,
            weight_decay: 4e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params
            .ids()
            .map(|id| Mat::zeros(params.get(id).raw_dim()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. A missing gradient counts as zero, so weight decay and
    /// moment decay still apply to that tensor.
    pub fn step(&mut self, params: &mut ParamStore, grads: Vec<Option<Mat>>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let [b1, b2] = self.config.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (eps, wd) = (self.config.eps, self.config.weight_decay);
        for ((id, grad), (m, v)) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let theta = params.get_mut(id);
            if let Some(g) = &grad {
                if g.dim() != theta.dim() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.dim(),
                        theta.dim()
                    )));
                }
            }
            let n = theta.len();
            let th = theta.as_slice_mut().expect("standard layout");
            let ms = m.as_slice_mut().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            let gs = grad.as_ref().map(|g| g.as_slice().expect("standard layout"));
            for i in 0..n {
                let g = gs.map_or(0.0, |gs| gs[i]) + wd * th[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                let m_hat = ms[i] / c1;
                let v_hat = vs[i] / c2;
                th[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` followed by cosine annealing to `min`, per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + (self.base - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
