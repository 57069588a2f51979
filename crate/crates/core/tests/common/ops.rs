//! Catalog of autodiff ops with randomized inputs, for finite-difference checks.

use pamt::numerics::{AttnSpan, Graph, Var};
use pamt::Result;
use rand::Rng;

use super::{max_grad_error, rand_away_from_zero, rand_tensor, rng};

pub struct OpCase {
    pub name: &'static str,
    /// Worst relative gradient error for one seed.
    pub check: fn(u64) -> Result<f64>,
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed ^ 0x9e37);
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn matmul(seed: u64) -> Result<f64> {
    let (m, k, n) = dims(seed);
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, m, k);
    let b = rand_tensor(&mut r, k, n);
    max_grad_error(|g, v| g.matmul(v[0], v[1]), &[a, b], seed)
}

fn matmul_t(seed: u64) -> Result<f64> {
    let (m, k, n) = dims(seed);
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, m, k);
    let b = rand_tensor(&mut r, n, k);
    max_grad_error(|g, v| g.matmul_t(v[0], v[1]), &[a, b], seed)
}

fn binary(seed: u64, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, m, n);
    let b = rand_tensor(&mut r, m, n);
    max_grad_error(|g, v| f(g, v[0], v[1]), &[a, b], seed)
}

fn add(seed: u64) -> Result<f64> {
    binary(seed, |g, a, b| g.add(a, b))
}

fn sub(seed: u64) -> Result<f64> {
    binary(seed, |g, a, b| g.sub(a, b))
}

fn mul(seed: u64) -> Result<f64> {
    binary(seed, |g, a, b| g.mul(a, b))
}

fn unary(seed: u64, f: fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, m, n + 1);
    max_grad_error(|g, v| f(g, v[0]), &[a], seed)
}

fn scale(seed: u64) -> Result<f64> {
    unary(seed, |g, a| g.scale(a, -1.7))
}

fn add_scalar(seed: u64) -> Result<f64> {
    unary(seed, |g, a| g.add_scalar(a, 0.3))
}

fn softmax(seed: u64) -> Result<f64> {
    unary(seed, |g, a| g.softmax(a))
}

fn log_softmax(seed: u64) -> Result<f64> {
    unary(seed, |g, a| g.log_softmax(a))
}

fn sum(seed: u64) -> Result<f64> {
    unary(seed, |g, a| g.sum(a))
}

fn relu(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let a = rand_away_from_zero(&mut rng(seed), m, n);
    max_grad_error(|g, v| g.relu(v[0]), &[a], seed)
}

fn add_row(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let mut r = rng(seed);
    let a = rand_tensor(&mut r, m, n);
    let b = rand_tensor(&mut r, 1, n);
    max_grad_error(|g, v| g.add_row(v[0], v[1]), &[a, b], seed)
}

fn layer_norm(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let n = n + 2;
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, m, n);
    let gain = rand_tensor(&mut r, 1, n);
    let bias = rand_tensor(&mut r, 1, n);
    max_grad_error(|g, v| g.layer_norm(v[0], v[1], v[2]), &[x, gain, bias], seed)
}

fn embedding(seed: u64) -> Result<f64> {
    let (rows, d, count) = dims(seed);
    let mut r = rng(seed);
    let table = rand_tensor(&mut r, rows + 1, d);
    let ids: Vec<usize> = (0..count + 2).map(|_| r.random_range(0..=rows)).collect();
    max_grad_error(move |g, v| g.embedding(v[0], &ids), &[table], seed)
}

fn gather_elems(seed: u64) -> Result<f64> {
    let (m, n, count) = dims(seed);
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, m, n);
    let pos: Vec<(usize, usize)> = (0..count + 2)
        .map(|_| (r.random_range(0..m), r.random_range(0..n)))
        .collect();
    max_grad_error(move |g, v| g.gather_elems(v[0], &pos), &[x], seed)
}

fn embedding_bag(seed: u64) -> Result<f64> {
    let (rows, k, n) = dims(seed);
    let mut r = rng(seed);
    let d = 3;
    let weights = rand_tensor(&mut r, n, k);
    let table = rand_tensor(&mut r, rows + 1, d);
    let idx: Vec<usize> = (0..n * k).map(|_| r.random_range(0..=rows)).collect();
    max_grad_error(move |g, v| g.embedding_bag(v[0], v[1], &idx), &[weights, table], seed)
}

fn attention(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let heads = r.random_range(1..3);
    let d = heads * r.random_range(1..4);
    let q_len = r.random_range(1..4);
    let k_len = q_len + r.random_range(0..3);
    let causal = r.random::<bool>();
    // two segments sharing nothing
    let spans = [
        AttnSpan {
            q_start: 0,
            q_len,
            k_start: 0,
            k_len,
            causal,
        },
        AttnSpan {
            q_start: q_len,
            q_len: 1,
            k_start: k_len,
            k_len: 2,
            causal: false,
        },
    ];
    let q = rand_tensor(&mut r, q_len + 1, d);
    let k = rand_tensor(&mut r, k_len + 2, d);
    let v = rand_tensor(&mut r, k_len + 2, d);
    max_grad_error(move |g, x| g.attention(x[0], x[1], x[2], &spans, heads), &[q, k, v], seed)
}

fn concat_cols(seed: u64) -> Result<f64> {
    let (m, a, b) = dims(seed);
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, m, a);
    let y = rand_tensor(&mut r, m, b);
    max_grad_error(|g, v| g.concat_cols(&[v[0], v[1], v[0]]), &[x, y], seed)
}

fn concat_rows(seed: u64) -> Result<f64> {
    let (a, b, n) = dims(seed);
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, a, n);
    let y = rand_tensor(&mut r, b, n);
    max_grad_error(|g, v| g.concat_rows(&[v[1], v[0]]), &[x, y], seed)
}

fn slice_cols(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let x = rand_tensor(&mut rng(seed), m, n + 2);
    max_grad_error(move |g, v| g.slice_cols(v[0], 1, n), &[x], seed)
}

fn slice_rows(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let x = rand_tensor(&mut rng(seed), m + 2, n);
    max_grad_error(move |g, v| g.slice_rows(v[0], 1, m), &[x], seed)
}

fn reshape(seed: u64) -> Result<f64> {
    let (m, n, _) = dims(seed);
    let x = rand_tensor(&mut rng(seed), m, 2 * n);
    max_grad_error(move |g, v| g.reshape(v[0], &[2 * m, n]), &[x], seed)
}

/// A small composite: relu MLP, layer norm, softmax cross-entropy pick.
fn composite(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, 3, 4);
    let w = rand_tensor(&mut r, 4, 5);
    let gain = rand_tensor(&mut r, 1, 5);
    let bias = rand_tensor(&mut r, 1, 5);
    max_grad_error(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let n = g.layer_norm(h, v[2], v[3])?;
            let s = g.log_softmax(n)?;
            g.gather_elems(s, &[(0, 1), (1, 4), (2, 0)])
        },
        &[x, w, gain, bias],
        seed,
    )
}

pub fn all() -> Vec<OpCase> {
    macro_rules! case {
        ($f:ident) => {
            OpCase {
                name: stringify!($f),
                check: $f,
            }
        };
    }
    vec![
        case!(matmul),
        case!(matmul_t),
        case!(add),
        case!(sub),
        case!(mul),
        case!(scale),
        case!(add_scalar),
        case!(add_row),
        case!(relu),
        case!(softmax),
        case!(log_softmax),
        case!(layer_norm),
        case!(embedding),
        case!(gather_elems),
        case!(embedding_bag),
        case!(attention),
        case!(concat_cols),
        case!(concat_rows),
        case!(slice_cols),
        case!(slice_rows),
        case!(reshape),
        case!(sum),
        case!(composite),
    ]
}
