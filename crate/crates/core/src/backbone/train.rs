//! Teacher-forced NLL training over supervision pairs.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{SupervisionPair, Token, PAD};
use super::model::GenIRModel;
use crate::error::{contract, Error, Result};
use crate::numerics::{
    log_sum_exp, Graph, Optimizer, OptimizerConfig, OptimizerKind, ParameterSet, Schedule, Var,
};

/// Something that adds a hidden-space correction before the tied output
/// projection (`logits = (h + b) E^T`).
pub trait HiddenCorrection {
    fn params(&self) -> &ParameterSet;
    fn params_mut(&mut self) -> &mut ParameterSet;
    /// Correction rows for each hidden row (same shape as `hidden`).
    fn correction(&self, g: &mut Graph, hidden: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Linear warmup over this fraction of all steps, then linear decay.
    /// `None` keeps the learning rate constant.
    pub warmup_frac: Option<f64>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn adamw(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 32,
            lr,
            optimizer: OptimizerKind::adamw(),
            warmup_frac: Some(0.1),
            clip_norm: Some(1.0),
            seed,
        }
    }

    fn optimizer_config(&self, total_steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            schedule: match self.warmup_frac {
                Some(warmup_frac) => Schedule::LinearWarmupDecay {
                    total_steps,
                    warmup_frac,
                },
                None => Schedule::Constant,
            },
            clip_norm: self.clip_norm,
        }
    }
}

/// Per-epoch mean token NLL.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_nll: Vec<f64>,
}

/// Sum of token NLL of `pairs` as a graph scalar, plus token count.
pub fn batch_nll(
    model: &GenIRModel,
    head: Option<&dyn HiddenCorrection>,
    g: &mut Graph,
    pairs: &[&SupervisionPair],
) -> Result<(Var, usize)> {
    let queries: Vec<&[Token]> = pairs.iter().map(|p| p.query.as_slice()).collect();
    let enc = model.encode(g, &queries)?;
    let cross = model.cross_kv(g, enc.memory)?;
    let inputs: Vec<Vec<Token>> = pairs
        .iter()
        .map(|p| {
            let mut v = Vec::with_capacity(p.target.len());
            v.push(PAD);
            v.extend_from_slice(&p.target[..p.target.len() - 1]);
            v
        })
        .collect();
    let refs: Vec<&[Token]> = inputs.iter().map(Vec::as_slice).collect();
    let mut hidden = model.decode(g, &cross, &enc.spans, &refs)?;
    if let Some(head) = head {
        let b = head.correction(g, hidden)?;
        hidden = g.add(hidden, b)?;
    }
    let logits = model.logits(g, hidden)?;
    let logp = g.log_softmax(logits)?;
    let mut positions = Vec::new();
    let mut row = 0;
    for p in pairs {
        for &t in &p.target {
            positions.push((row, t as usize));
            row += 1;
        }
    }
    let picked = g.gather_elems(logp, &positions)?;
    let total = g.sum(picked)?;
    let nll = g.scale(total, -1.0)?;
    Ok((nll, positions.len()))
}

/// Train `model` (and `head` when given) on `pairs`.
pub fn train_nll(
    model: &mut GenIRModel,
    mut head: Option<&mut dyn HiddenCorrection>,
    pairs: &[SupervisionPair],
    config: &TrainConfig,
) -> Result<TrainLog> {
    if pairs.is_empty() {
        return Err(contract("train_nll needs at least one pair"));
    }
    if config.batch_size == 0 {
        return Err(contract("batch size must be >= 1"));
    }
    for p in pairs {
        if p.target.is_empty() {
            return Err(contract("empty docid target"));
        }
    }
    let batches_per_epoch = pairs.len().div_ceil(config.batch_size);
    let opt_cfg = config.optimizer_config(batches_per_epoch * config.epochs);
    let mut model_opt = Optimizer::new(opt_cfg);
    let mut head_opt = Optimizer::new(opt_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SupervisionPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut g = Graph::new();
            let (nll, n) = batch_nll(model, head.as_deref().map(|h| h as &dyn HiddenCorrection), &mut g, &batch)
                .map_err(|e| diverged(e, epoch, bi))?;
            let batch_total = g.value(nll).item();
            let loss = g.scale(nll, 1.0 / n as f64)?;
            let grads = g.backward(loss).map_err(|e| diverged(e, epoch, bi))?;
            drop(g);
            model.params_mut().load_grads(&grads)?;
            model_opt.masked_step(model.params_mut(), &[])?;
            if let Some(h) = head.as_deref_mut() {
                h.params_mut().load_grads(&grads)?;
                head_opt.masked_step(h.params_mut(), &[])?;
            }
            total += batch_total;
            tokens += n;
        }
        let mean = total / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: mean NLL {mean}")));
        }
        if epoch % 10 == 0 || epoch + 1 == config.epochs {
            info!("epoch {epoch}: mean token NLL {mean:.5}");
        } else {
            debug!("epoch {epoch}: mean token NLL {mean:.5}");
        }
        log.epoch_nll.push(mean);
    }
    Ok(log)
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!(
            "non-finite value in `{op}` at epoch {epoch}, batch {batch}"
        )),
        other => other,
    }
}

/// Per-token log-probabilities of `target` under teacher forcing, using the
/// full-vocabulary softmax of `(h + b) E^T`.
pub fn teacher_forced_logprobs(
    model: &GenIRModel,
    head: Option<&dyn HiddenCorrection>,
    query: &[Token],
    target: &[Token],
) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(contract("empty target"));
    }
    let mut g = Graph::no_grad();
    let pair = SupervisionPair {
        query: query.to_vec(),
        target: target.to_vec(),
        kind: super::config::PairKind::Query2Docid,
    };
    let queries = [pair.query.as_slice()];
    let enc = model.encode(&mut g, &queries)?;
    let cross = model.cross_kv(&mut g, enc.memory)?;
    let mut input = vec![PAD];
    input.extend_from_slice(&target[..target.len() - 1]);
    let mut hidden = model.decode(&mut g, &cross, &enc.spans, &[input.as_slice()])?;
    if let Some(head) = head {
        let b = head.correction(&mut g, hidden)?;
        hidden = g.add(hidden, b)?;
    }
    let logits = model.logits(&mut g, hidden)?;
    let l = g.value(logits);
    Ok(target
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let row = l.row(k);
            row[t as usize] - log_sum_exp(row)
        })
        .collect())
}

/// Mean token NLL over `pairs` without training.
pub fn mean_nll(
    model: &GenIRModel,
    head: Option<&dyn HiddenCorrection>,
    pairs: &[SupervisionPair],
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for chunk in pairs.chunks(64) {
        let mut g = Graph::no_grad();
        let batch: Vec<&SupervisionPair> = chunk.iter().collect();
        let (nll, n) = batch_nll(model, head, &mut g, &batch)?;
        total += g.value(nll).item();
        tokens += n;
    }
    if tokens == 0 {
        return Err(contract("no tokens"));
    }
    Ok(total / tokens as f64)
}
