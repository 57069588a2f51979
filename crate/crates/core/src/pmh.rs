//! Product-key memory head.
//!
//! The final decoder hidden state is projected to `heads` queries. Each query
//! is split in two halves scored against two sub-key tables of `S` rows; the
//! pair `(i, j)` addresses value row `i * S + j` (0-based here, so the
//! 1-based `flatten_index` is this plus one). The retrieved rows are mixed
//! with softmax weights into a hidden-space correction `b`, which shifts the
//! score of every trie-valid token `t` by `<b, E[t]>`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{HiddenCorrection, Token};
use crate::error::{contract, Error, Result};
use crate::numerics::{dot, softmax_in_place, Graph, ParameterSet, Tensor, Var};
use crate::trie::ScoreHook;

pub const FPHI: &str = "pmh.fphi";
pub const KEYS1: &str = "pmh.k1";
pub const KEYS2: &str = "pmh.k2";
pub const VALUES: &str = "pmh.vhid";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmhConfig {
    pub heads: usize,
    /// Query/key width per head; split into two halves.
    pub key_dim: usize,
    /// Rows per sub-key table; the value table has `sub_keys^2` rows.
    pub sub_keys: usize,
    /// Rows retrieved per head.
    pub top_k: usize,
    /// Backbone hidden width.
    pub hidden: usize,
    /// Document-driven capacity; rows at or beyond it are padding.
    pub capacity: usize,
}

impl PmhConfig {
    /// Smallest square table holding `capacity` rows.
    pub fn for_capacity(heads: usize, key_dim: usize, top_k: usize, hidden: usize, capacity: usize) -> Self {
        let mut s = (capacity as f64).sqrt().floor() as usize;
        while s * s < capacity {
            s += 1;
        }
        Self {
            heads,
            key_dim,
            sub_keys: s.max(1),
            top_k,
            hidden,
            capacity,
        }
    }

    pub fn rows(&self) -> usize {
        self.sub_keys * self.sub_keys
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || self.sub_keys == 0 {
            return bad("memory head sizes must be positive".into());
        }
        if self.key_dim == 0 || !self.key_dim.is_multiple_of(2) {
            return bad(format!("key_dim {} must be even and positive", self.key_dim));
        }
        if self.top_k == 0 || self.top_k > self.sub_keys {
            return bad(format!(
                "top_k {} must be in 1..={} (sub-table size)",
                self.top_k, self.sub_keys
            ));
        }
        if self.capacity == 0 || self.capacity > self.rows() {
            return bad(format!(
                "capacity {} must be in 1..={}",
                self.capacity,
                self.rows()
            ));
        }
        Ok(())
    }

    pub fn is_padded(&self, row: usize) -> bool {
        row >= self.capacity
    }
}

/// 1-based row of the key pair `(i, j)`: `(i - 1) * S + j`.
pub fn flatten_index(i: usize, j: usize, sub_keys: usize) -> Result<usize> {
    if !(1..=sub_keys).contains(&i) || !(1..=sub_keys).contains(&j) {
        return Err(contract(format!(
            "key pair ({i}, {j}) outside 1..={sub_keys}"
        )));
    }
    Ok((i - 1) * sub_keys + j)
}

/// Rows chosen by one head, best first, with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSelection {
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
}

impl HeadSelection {
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.scores.clone();
        softmax_in_place(&mut w);
        w
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[derive(Clone, Debug)]
pub struct MemoryHead {
    config: PmhConfig,
    params: ParameterSet,
}

impl MemoryHead {
    /// Value rows start at zero, so a fresh head changes no score.
    pub fn new(config: PmhConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let half = config.key_dim / 2;
        let mut params = ParameterSet::new();
        params.insert(
            FPHI,
            Tensor::randn(
                &[config.hidden, config.heads * config.key_dim],
                1.0 / (config.hidden as f64).sqrt(),
                rng,
            ),
        );
        let key_std = 1.0 / (half as f64).sqrt();
        params.insert(KEYS1, Tensor::randn(&[config.sub_keys, half], key_std, rng));
        params.insert(KEYS2, Tensor::randn(&[config.sub_keys, half], key_std, rng));
        params.insert(VALUES, Tensor::zeros(&[config.rows(), config.hidden]));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: PmhConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let half = config.key_dim / 2;
        let expect = [
            (FPHI, vec![config.hidden, config.heads * config.key_dim]),
            (KEYS1, vec![config.sub_keys, half]),
            (KEYS2, vec![config.sub_keys, half]),
            (VALUES, vec![config.rows(), config.hidden]),
        ];
        for (name, shape) in expect {
            if params.value(name)?.shape() != shape.as_slice() {
                return Err(contract(format!("`{name}` has wrong shape")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PmhConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn values(&self) -> &Tensor {
        self.params.value(VALUES).expect("value table present")
    }

    /// Freeze the query projection and both key tables.
    pub fn freeze_addressing(&mut self) {
        for name in [FPHI, KEYS1, KEYS2] {
            self.params.set_frozen(name, true).expect("addressing params present");
        }
    }

    /// Digest of the query projection and key tables.
    pub fn addressing_digest(&self) -> String {
        let mut ps = ParameterSet::new();
        for name in [FPHI, KEYS1, KEYS2] {
            ps.insert(name, self.params.value(name).expect("present").clone());
        }
        ps.digest()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(
            dir.join("pmh_config.toml"),
            toml::to_string(&self.config).expect("flat config serializes"),
        )?;
        self.params.save(&dir.join("pmh.ckpt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("pmh_config.toml"))?;
        let config: PmhConfig = toml::from_str(&text).map_err(|e| Error::Format {
            what: "memory head config",
            detail: e.to_string(),
        })?;
        Self::from_parts(config, ParameterSet::load(&dir.join("pmh.ckpt"))?)
    }

    /// Per-head queries `h @ f_phi`.
    fn project(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.config.hidden {
            return Err(contract(format!(
                "hidden width {} does not match memory head width {}",
                hidden.len(),
                self.config.hidden
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "pmh.address" });
        }
        let f = self.params.value(FPHI)?;
        let width = f.cols();
        let mut z = vec![0.0; width];
        for (r, &h) in hidden.iter().enumerate() {
            for (zc, fc) in z.iter_mut().zip(f.row(r)) {
                *zc += h * fc;
            }
        }
        Ok(z)
    }

    /// Top rows per head by `<z1, K1[i]> + <z2, K2[j]>`, using factorized
    /// lookup: the best `top_k` of each sub-table, then the best `top_k` of
    /// the `top_k^2` candidate pairs. Ties go to the lower row index.
    pub fn address(&self, hidden: &[f64]) -> Result<Vec<HeadSelection>> {
        let z = self.project(hidden)?;
        let k1 = self.params.value(KEYS1)?;
        let k2 = self.params.value(KEYS2)?;
        let cfg = &self.config;
        let half = cfg.key_dim / 2;
        let mut out = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let z1 = &z[h * cfg.key_dim..h * cfg.key_dim + half];
            let z2 = &z[h * cfg.key_dim + half..(h + 1) * cfg.key_dim];
            let s1: Vec<f64> = (0..cfg.sub_keys).map(|i| dot(z1, k1.row(i))).collect();
            let s2: Vec<f64> = (0..cfg.sub_keys).map(|j| dot(z2, k2.row(j))).collect();
            let top1 = top_k_indices(&s1, cfg.top_k);
            let top2 = top_k_indices(&s2, cfg.top_k);
            let mut cand: Vec<(usize, f64)> = Vec::with_capacity(top1.len() * top2.len());
            for &i in &top1 {
                for &j in &top2 {
                    cand.push((i * cfg.sub_keys + j, s1[i] + s2[j]));
                }
            }
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(cfg.top_k);
            out.push(HeadSelection {
                rows: cand.iter().map(|c| c.0).collect(),
                scores: cand.iter().map(|c| c.1).collect(),
            });
        }
        Ok(out)
    }

    /// `b = sum_h sum_l alpha_{h,l} V[l]`.
    pub fn correction(&self, selections: &[HeadSelection]) -> Result<Vec<f64>> {
        correction_from(self.values(), selections)
    }

    /// Union of the rows chosen by all heads.
    pub fn selected_rows(selections: &[HeadSelection]) -> BTreeSet<usize> {
        selections.iter().flat_map(|s| s.rows.iter().copied()).collect()
    }
}

/// Correction against an explicit value table.
pub fn correction_from(values: &Tensor, selections: &[HeadSelection]) -> Result<Vec<f64>> {
    let mut b = vec![0.0; values.cols()];
    for sel in selections {
        if sel.rows.is_empty() {
            return Err(contract("empty head selection"));
        }
        for (&row, a) in sel.rows.iter().zip(sel.weights()) {
            for (bc, vc) in b.iter_mut().zip(values.row(row)) {
                *bc += a * vc;
            }
        }
    }
    Ok(b)
}

/// `logits[t] + <b, E[t]>` for each valid token; cost is linear in the
/// number of valid tokens.
pub fn bias_valid_logits(valid_logits: &[f64], bias: &[f64], embedding: &Tensor, valid: &[Token]) -> Vec<f64> {
    valid_logits
        .iter()
        .zip(valid)
        .map(|(l, &t)| l + dot(bias, embedding.row(t as usize)))
        .collect()
}

impl HiddenCorrection for MemoryHead {
    fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Differentiable correction for every row of `hidden`. Row selection
    /// itself is a hard top-k and carries no gradient; the selected scores do.
    fn correction(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let cfg = &self.config;
        let half = cfg.key_dim / 2;
        let rows = g.value(hidden).rows();
        let mut selections = Vec::with_capacity(rows);
        for r in 0..rows {
            selections.push(self.address(g.value(hidden).row(r))?);
        }
        let fphi = g.param(&self.params, FPHI)?;
        let k1 = g.param(&self.params, KEYS1)?;
        let k2 = g.param(&self.params, KEYS2)?;
        let values = g.param(&self.params, VALUES)?;
        let z = g.matmul(hidden, fphi)?;
        let mut total: Option<Var> = None;
        for h in 0..cfg.heads {
            let z1 = g.slice_cols(z, h * cfg.key_dim, half)?;
            let z2 = g.slice_cols(z, h * cfg.key_dim + half, half)?;
            let s1 = g.matmul_t(z1, k1)?;
            let s2 = g.matmul_t(z2, k2)?;
            let mut pos1 = Vec::with_capacity(rows * cfg.top_k);
            let mut pos2 = Vec::with_capacity(rows * cfg.top_k);
            let mut idx = Vec::with_capacity(rows * cfg.top_k);
            for (r, sel) in selections.iter().enumerate() {
                for &n in &sel[h].rows {
                    pos1.push((r, n / cfg.sub_keys));
                    pos2.push((r, n % cfg.sub_keys));
                    idx.push(n);
                }
            }
            let u1 = g.gather_elems(s1, &pos1)?;
            let u2 = g.gather_elems(s2, &pos2)?;
            let u = g.add(u1, u2)?;
            let u = g.reshape(u, &[rows, cfg.top_k])?;
            let alpha = g.softmax(u)?;
            let b = g.embedding_bag(alpha, values, &idx)?;
            total = Some(match total {
                Some(t) => g.add(t, b)?,
                None => b,
            });
        }
        Ok(total.expect("at least one head"))
    }
}

/// Score hook adding the memory correction to valid-token logits and
/// recording which rows each decoding step read.
pub struct MemoryBias<'a> {
    head: &'a MemoryHead,
    embedding: &'a Tensor,
    trace: Vec<(Vec<Token>, BTreeSet<usize>)>,
}

impl<'a> MemoryBias<'a> {
    pub fn new(head: &'a MemoryHead, embedding: &'a Tensor) -> Self {
        Self {
            head,
            embedding,
            trace: Vec::new(),
        }
    }

    /// `(prefix, rows)` for every scored hypothesis, in call order.
    pub fn trace(&self) -> &[(Vec<Token>, BTreeSet<usize>)] {
        &self.trace
    }

    /// Per-step row sets along one decoded sequence.
    pub fn steps_for(&self, seq: &[Token]) -> Vec<BTreeSet<usize>> {
        (0..seq.len())
            .filter_map(|k| {
                self.trace
                    .iter()
                    .find(|(p, _)| p.as_slice() == &seq[..k])
                    .map(|(_, r)| r.clone())
            })
            .collect()
    }

    /// Row sets of every scored hypothesis.
    pub fn all_steps(&self) -> Vec<BTreeSet<usize>> {
        self.trace.iter().map(|(_, r)| r.clone()).collect()
    }
}

impl ScoreHook for MemoryBias<'_> {
    fn bias(&mut self, _step: usize, prefix: &[Token], hidden: &[f64], valid: &[Token]) -> Result<Vec<f64>> {
        let sel = self.head.address(hidden)?;
        let b = self.head.correction(&sel)?;
        self.trace
            .push((prefix.to_vec(), MemoryHead::selected_rows(&sel)));
        Ok(valid
            .iter()
            .map(|&t| dot(&b, self.embedding.row(t as usize)))
            .collect())
    }
}

/// Rows read while decoding one query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessRecord {
    pub query: u32,
    pub steps: Vec<BTreeSet<usize>>,
    pub union: BTreeSet<usize>,
}

/// Build the access record of one decode: `S(x)` is the union over steps.
pub fn record_access(query: u32, steps: Vec<BTreeSet<usize>>) -> AccessRecord {
    let union = steps.iter().flatten().copied().collect();
    AccessRecord { query, steps, union }
}
