//! SGD and AdamW with row-level gradient masking and linear warmup/decay.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear ramp over the first `warmup_frac` of `total_steps`, then linear
    /// decay to zero.
    LinearWarmupDecay { total_steps: usize, warmup_frac: f64 },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::LinearWarmupDecay {
                total_steps,
                warmup_frac,
            } => {
                let total = total_steps.max(1);
                let warm = ((warmup_frac * total as f64).round() as usize).clamp(1, total);
                if step < warm {
                    (step + 1) as f64 / warm as f64
                } else if total == warm {
                    1.0
                } else {
                    total.saturating_sub(step) as f64 / (total - warm) as f64
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip over all trainable, unmasked rows.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            schedule: Schedule::Constant,
            clip_norm: None,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adamw(),
            lr,
            schedule: Schedule::Constant,
            clip_norm: None,
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Restricts updates of one parameter to a set of row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowGradientMask {
    pub param: String,
    pub allowed: BTreeSet<usize>,
}

impl RowGradientMask {
    pub fn new(param: impl Into<String>, allowed: impl IntoIterator<Item = usize>) -> Self {
        Self {
            param: param.into(),
            allowed: allowed.into_iter().collect(),
        }
    }
}

/// Per-row first/second moments.
#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// number of updates applied to each row (for bias correction)
    steps: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    /// Moment buffers of one row (for audit/tests): `(m, v)`.
    pub fn row_moments(&self, param: &str, row: usize, cols: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        self.moments.get(param).map(|mo| {
            (
                mo.m[row * cols..(row + 1) * cols].to_vec(),
                mo.v[row * cols..(row + 1) * cols].to_vec(),
            )
        })
    }

    /// Apply one update using the gradients stored in `params`.
    ///
    /// Frozen parameters are skipped. For a parameter named by a mask, rows
    /// outside the allowed set keep their values and moment buffers.
    pub fn masked_step(&mut self, params: &mut ParameterSet, masks: &[RowGradientMask]) -> Result<()> {
        let mut allowed_rows: BTreeMap<&str, &BTreeSet<usize>> = BTreeMap::new();
        for mask in masks {
            let p = params.get(&mask.param)?;
            let rows = p.value().rows();
            if let Some(&bad) = mask.allowed.iter().find(|&&r| r >= rows) {
                return Err(contract(format!(
                    "mask row {bad} out of range for `{}` ({rows} rows)",
                    mask.param
                )));
            }
            if allowed_rows.insert(mask.param.as_str(), &mask.allowed).is_some() {
                return Err(contract(format!("two masks for `{}`", mask.param)));
            }
        }
        let row_ok = |name: &str, r: usize| allowed_rows.get(name).is_none_or(|set| set.contains(&r));

        let clip_scale = match self.config.clip_norm {
            Some(max_norm) => {
                let mut sq = 0.0;
                for (name, p) in params.iter() {
                    if p.is_frozen() {
                        continue;
                    }
                    let cols = p.value().cols().max(1);
                    for (r, chunk) in p.grad().data().chunks(cols).enumerate() {
                        if row_ok(name, r) {
                            sq += chunk.iter().map(|g| g * g).sum::<f64>();
                        }
                    }
                }
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = self.current_lr();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let frozen = params.get(&name)?.is_frozen();
            if frozen {
                continue;
            }
            let mask = allowed_rows.get(name.as_str()).copied();
            if mask.is_some_and(|m| m.is_empty()) {
                continue;
            }
            let (value, grad) = params
                .value_and_grad_mut(&name)
                .expect("name listed above");
            let cols = value.cols().max(1);
            let rows = value.rows();
            let row_iter: Box<dyn Iterator<Item = usize>> = match mask {
                Some(set) => Box::new(set.iter().copied()),
                None => Box::new(0..rows),
            };
            match self.config.kind {
                OptimizerKind::Sgd => {
                    let data = value.data_mut();
                    let g = grad.data();
                    for r in row_iter {
                        for i in r * cols..(r + 1) * cols {
                            data[i] -= lr * clip_scale * g[i];
                        }
                    }
                }
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; rows * cols],
                        v: vec![0.0; rows * cols],
                        steps: vec![0; rows],
                    });
                    let data = value.data_mut();
                    let g = grad.data();
                    for r in row_iter {
                        mo.steps[r] += 1;
                        let t = mo.steps[r] as i32;
                        let bc1 = 1.0 - beta1.powi(t);
                        let bc2 = 1.0 - beta2.powi(t);
                        for i in r * cols..(r + 1) * cols {
                            let gi = g[i] * clip_scale;
                            mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * gi;
                            mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * gi * gi;
                            let mhat = mo.m[i] / bc1;
                            let vhat = mo.v[i] / bc2;
                            data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * data[i]);
                        }
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
