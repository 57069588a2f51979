//! Post-adaptation memory tuning: access statistics, protected and update
//! row sets, and the value-only ranking stage.
//!
//! Rows are 0-based throughout.

mod log;
mod tune;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::log::AccessLog;
pub use tune::{
    collect_session_accesses, full_hinge_loss, prepare_examples, stage2_train, Stage2Example, Stage2Report,
    TuningData,
};

use crate::backbone::Token;
use crate::error::{contract, Result};
use crate::pmh::AccessRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Fraction of rows protected by historical usage.
    pub protected_frac: f64,
    /// Maximum number of value rows updated per session.
    pub budget: usize,
    pub margin: f64,
    pub negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub batch_size: usize,
    /// Beam width used when collecting accesses (1 = greedy; wider beams
    /// record the union over all scored hypotheses).
    pub access_beam: usize,
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.protected_frac) {
            return Err(contract("protected fraction must be in [0, 1)"));
        }
        if self.budget == 0 {
            return Err(contract("update budget must be >= 1"));
        }
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return Err(contract("margin must be positive"));
        }
        if self.batch_size == 0 || self.access_beam == 0 {
            return Err(contract("batch size and access beam must be >= 1"));
        }
        Ok(())
    }
}

/// Current-session access frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionStats {
    /// Number of sequences that read each row at least once.
    pub counts: Vec<u64>,
    /// `counts` normalized to sum to one (all zero when nothing was read).
    pub normalized: Vec<f64>,
}

impl SessionStats {
    pub fn from_records(records: &[AccessRecord], rows: usize) -> Result<Self> {
        let mut counts = vec![0u64; rows];
        for r in records {
            for &n in &r.union {
                if n >= rows {
                    return Err(contract(format!("access to row {n} beyond {rows} rows")));
                }
                counts[n] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let normalized = if total == 0 {
            vec![0.0; rows]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Ok(Self { counts, normalized })
    }
}

/// The `floor(p * N)` rows with the highest historical counts (ties: lower row).
pub fn select_protected(hist: &[u64], protected_frac: f64) -> Result<BTreeSet<usize>> {
    if !(0.0..1.0).contains(&protected_frac) {
        return Err(contract("protected fraction must be in [0, 1)"));
    }
    let count = (protected_frac * hist.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..hist.len()).collect();
    idx.sort_by(|&a, &b| hist[b].cmp(&hist[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(count).collect())
}

/// Inverse historical frequency `ln((Z + 1) / (hist + 1))`.
pub fn inverse_hist_freq(hist: u64, total_queries: u64) -> f64 {
    ((total_queries as f64 + 1.0) / (hist as f64 + 1.0)).ln()
}

/// `w(n) = normalized(n) * ln((Z + 1) / (hist(n) + 1))` for candidate rows,
/// zero elsewhere.
pub fn afihf_scores(
    normalized: &[f64],
    hist: &[u64],
    total_queries: u64,
    protected: &BTreeSet<usize>,
) -> Result<Vec<f64>> {
    if normalized.len() != hist.len() {
        return Err(contract("statistics and history disagree on row count"));
    }
    Ok(normalized
        .iter()
        .zip(hist)
        .enumerate()
        .map(|(n, (&a, &h))| {
            if protected.contains(&n) {
                0.0
            } else {
                a * inverse_hist_freq(h, total_queries)
            }
        })
        .collect())
}

/// Top-`budget` rows by score among candidates, skipping rows with score
/// `<= 0`, protected rows, and padded rows (`row >= capacity`).
pub fn select_update_set(
    scores: &[f64],
    protected: &BTreeSet<usize>,
    capacity: usize,
    budget: usize,
) -> Result<BTreeSet<usize>> {
    if budget == 0 {
        return Err(contract("update budget must be >= 1"));
    }
    let mut cand: Vec<usize> = (0..scores.len().min(capacity))
        .filter(|n| scores[*n] > 0.0 && !protected.contains(n))
        .collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(cand.into_iter().take(budget).collect())
}

/// Rows protected and rows to update in one session, with the inputs that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdatePlan {
    pub protected: BTreeSet<usize>,
    pub update: BTreeSet<usize>,
    pub hist: Vec<u64>,
    pub normalized: Vec<f64>,
    pub scores: Vec<f64>,
}

impl UpdatePlan {
    pub fn build(
        log: &AccessLog,
        stats: &SessionStats,
        config: &SelectionConfig,
        capacity: usize,
    ) -> Result<Self> {
        let protected = select_protected(log.hist(), config.protected_frac)?;
        let scores = afihf_scores(&stats.normalized, log.hist(), log.total_queries(), &protected)?;
        let update = select_update_set(&scores, &protected, capacity, config.budget)?;
        Ok(Self {
            protected,
            update,
            hist: log.hist().to_vec(),
            normalized: stats.normalized.clone(),
            scores,
        })
    }

    /// Audit dump: `row  hist  normalized  score  set` for every row that is
    /// protected, selected, or was accessed this session.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row\taf_hist\taf_norm\tscore\tset\n");
        for n in 0..self.hist.len() {
            let set = if self.protected.contains(&n) {
                "protected"
            } else if self.update.contains(&n) {
                "update"
            } else if self.normalized[n] > 0.0 {
                "candidate"
            } else {
                continue;
            };
            let _ = writeln!(
                out,
                "{n}\t{}\t{:.6e}\t{:.6e}\t{set}",
                self.hist[n], self.normalized[n], self.scores[n]
            );
        }
        out
    }
}

/// Up to `k` distinct tokens from `valid` other than `gold`, uniformly
/// without replacement.
pub fn sample_negatives(valid: &[Token], gold: Token, k: usize, rng: &mut impl Rng) -> Result<Vec<Token>> {
    if !valid.contains(&gold) {
        return Err(contract(format!("gold token {gold} not in the valid set")));
    }
    let pool: Vec<Token> = valid.iter().copied().filter(|&t| t != gold).collect();
    let amount = k.min(pool.len());
    Ok(rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// One teacher-forced step: biased gold score and biased negative scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RankStep {
    pub gold: f64,
    pub negatives: Vec<f64>,
}

/// `sum_k sum_neg max(0, margin - gold_k + neg)`.
pub fn hinge_rank_loss(steps: &[RankStep], margin: f64) -> f64 {
    steps
        .iter()
        .flat_map(|s| s.negatives.iter().map(move |n| (margin - s.gold + n).max(0.0)))
        .sum()
}
