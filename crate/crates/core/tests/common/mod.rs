//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod fixtures;
pub mod ops;

use std::collections::BTreeSet;

use pamt::numerics::{Graph, Tensor, Var};
use pamt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Values bounded away from zero, for inputs that pass through a relu.
pub fn rand_away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `sum(f(inputs) * probe)` built on a fresh graph; returns loss and the
/// input vars.
fn probe_loss<F>(f: &F, inputs: &[Tensor], probe_seed: u64, grad: bool) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = if grad { Graph::new() } else { Graph::no_grad() };
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(probe_seed);
    let probe = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let p = g.constant(probe);
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod)?;
    Ok((g, loss, vars))
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every input entry. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn max_grad_error<F>(f: F, inputs: &[Tensor], probe_seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, loss, vars) = probe_loss(&f, inputs, probe_seed, true)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (g, loss, _) = probe_loss(&f, &moved, probe_seed, false)?;
                Ok(g.value(loss).item())
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Brute-force top-`k` rows over all `S^2` key pairs for one head, with
/// 0-based rows `i * S + j`, ties to the lower row.
pub fn brute_force_top_rows(z1: &[f64], z2: &[f64], k1: &Tensor, k2: &Tensor, k: usize) -> BTreeSet<usize> {
    let s = k1.rows();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut all: Vec<(f64, usize)> = Vec::with_capacity(s * s);
    for i in 0..s {
        let a = dot(z1, k1.row(i));
        for j in 0..s {
            all.push((a + dot(z2, k2.row(j)), i * s + j));
        }
    }
    all.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    all.into_iter().take(k).map(|(_, r)| r).collect()
}

/// Reference metric aggregates written directly from their definitions.
pub fn reference_ap(r: &[Vec<f64>], n: usize) -> f64 {
    let mut s = 0.0;
    for v in &r[n][..=n] {
        s += v;
    }
    s / (n as f64 + 1.0)
}

pub fn reference_bwt(r: &[Vec<f64>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        s += r[n][i] - r[i][i];
    }
    s / n as f64
}

pub fn reference_fwt(r: &[Vec<f64>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 1..=n {
        s += r[i][i];
    }
    s / n as f64
}

/// Random lower-triangular matrix with entries in [0, 1].
pub fn random_triangle(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..=n)
        .map(|t| (0..=t).map(|_| rng.random_range(0.0..=1.0)).collect())
        .collect()
}

/// Reverse-mode vs central differences for the full teacher-forced NLL of a
/// small backbone plus memory head, on `coords` random entries of every
/// parameter. Values are randomized so the key gradients are non-zero.
pub fn model_grad_error(seed: u64, coords: usize) -> Result<f64> {
    use pamt::backbone::{batch_nll, BackboneConfig, GenIRModel, PairKind, SupervisionPair, EOS};
    use pamt::pmh::{MemoryHead, PmhConfig, VALUES};

    let mut r = rng(seed);
    let config = BackboneConfig {
        vocab_size: 24,
        d_model: 8,
        d_ff: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        max_query_len: 6,
        max_docid_len: 4,
    };
    let model = GenIRModel::new(config, &mut r)?;
    let mut head = MemoryHead::new(PmhConfig::for_capacity(2, 4, 2, 8, 16), &mut r)?;
    let rows = head.values().rows();
    *head.params_mut().value_mut(VALUES)? = rand_tensor(&mut r, rows, 8);
    let pairs: Vec<SupervisionPair> = (0..2)
        .map(|_| {
            let q: Vec<u32> = (0..r.random_range(1..6)).map(|_| r.random_range(2..24)).collect();
            let t: Vec<u32> = (0..r.random_range(1..3)).map(|_| r.random_range(2..24)).chain([EOS]).collect();
            SupervisionPair::new(q, t, PairKind::Query2Docid)
        })
        .collect();
    let refs: Vec<&SupervisionPair> = pairs.iter().collect();
    let loss_of = |model: &GenIRModel, head: &MemoryHead, grad: bool| -> Result<(Graph, Var)> {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let (nll, _) = batch_nll(model, Some(head), &mut g, &refs)?;
        Ok((g, nll))
    };
    let (g, loss) = loss_of(&model, &head, true)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let model_names: Vec<String> = model.params().names().map(str::to_string).collect();
    let head_names: Vec<String> = head.params().names().map(str::to_string).collect();
    for (in_head, name) in model_names.iter().map(|n| (false, n)).chain(head_names.iter().map(|n| (true, n))) {
        let numel = if in_head { head.params().value(name)?.numel() } else { model.params().value(name)?.numel() };
        let analytic = grads.param(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        for _ in 0..coords {
            let j = r.random_range(0..numel);
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                let mut h = head.clone();
                let set = if in_head { h.params_mut() } else { m.params_mut() };
                set.value_mut(name)?.data_mut()[j] += delta;
                let (g, loss) = loss_of(&m, &h, false)?;
                Ok(g.value(loss).item())
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    Ok(worst)
}
