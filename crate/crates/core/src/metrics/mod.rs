//! Retrieval metrics, continual-learning aggregates over the lower-triangular
//! session x slice matrix, and report files.

mod plot;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use plot::plot_report;

use crate::error::{contract, Error, Result};

/// 1-based rank of the first relevant item within the top `k`, if any.
pub fn first_hit_rank<T: PartialEq>(ranked: &[T], gold: &[T], k: usize) -> Option<usize> {
    ranked
        .iter()
        .take(k)
        .position(|r| gold.contains(r))
        .map(|p| p + 1)
}

/// Reciprocal rank of the first relevant item within the top `k`, else 0.
pub fn reciprocal_rank<T: PartialEq>(ranked: &[T], gold: &[T], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract("k must be >= 1"));
    }
    Ok(first_hit_rank(ranked, gold, k).map_or(0.0, |r| 1.0 / r as f64))
}

/// 1 if any relevant item is within the top `k`, else 0.
pub fn hit<T: PartialEq>(ranked: &[T], gold: &[T], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract("k must be >= 1"));
    }
    Ok(if first_hit_rank(ranked, gold, k).is_some() {
        1.0
    } else {
        0.0
    })
}

/// Mean MRR@k over queries given `(ranked, gold)` pairs.
pub fn mrr_at_k<T: PartialEq>(queries: &[(Vec<T>, Vec<T>)], k: usize) -> Result<f64> {
    mean_over(queries, |r, g| reciprocal_rank(r, g, k))
}

/// Mean Hit@k over queries.
pub fn hit_at_k<T: PartialEq>(queries: &[(Vec<T>, Vec<T>)], k: usize) -> Result<f64> {
    mean_over(queries, |r, g| hit(r, g, k))
}

fn mean_over<T>(queries: &[(Vec<T>, Vec<T>)], f: impl Fn(&[T], &[T]) -> Result<f64>) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, g) in queries {
        total += f(r, g)?;
    }
    Ok(total / queries.len() as f64)
}

/// `mrr[t][s]` and `hit[t][s]` for `0 <= s <= t`, as fractions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub mrr: Vec<Vec<f64>>,
    pub hit: Vec<Vec<f64>>,
}

impl ResultsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append session row `t` (must be the next row, with `t + 1` entries).
    pub fn push_row(&mut self, mrr: Vec<f64>, hit: Vec<f64>) -> Result<()> {
        let t = self.mrr.len();
        if mrr.len() != t + 1 || hit.len() != t + 1 {
            return Err(contract(format!(
                "row {t} needs {} entries, got {}/{}",
                t + 1,
                mrr.len(),
                hit.len()
            )));
        }
        if mrr.iter().chain(&hit).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("metric values must lie in [0, 1]"));
        }
        self.mrr.push(mrr);
        self.hit.push(hit);
        Ok(())
    }

    /// Replace row `t`, truncating anything after it (used when resuming).
    pub fn set_row(&mut self, t: usize, mrr: Vec<f64>, hit: Vec<f64>) -> Result<()> {
        if t > self.mrr.len() {
            return Err(contract(format!("row {t} would leave a gap")));
        }
        self.mrr.truncate(t);
        self.hit.truncate(t);
        self.push_row(mrr, hit)
    }

    /// Index of the last complete session row.
    pub fn last_session(&self) -> Option<usize> {
        self.mrr.len().checked_sub(1)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.mrr.len()).map(|s| self.mrr[s][s]).collect()
    }

    /// `session,slice,mrr10,hit10` with one line per lower-triangular entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("session,slice,mrr10,hit10\n");
        for t in 0..self.mrr.len() {
            for s in 0..=t {
                let _ = writeln!(out, "{t},{s},{},{}", self.mrr[t][s], self.hit[t][s]);
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Format {
            what: "results csv",
            detail: d,
        };
        let mut lines = text.lines();
        if lines.next() != Some("session,slice,mrr10,hit10") {
            return Err(bad("missing header".into()));
        }
        let mut m = Self::new();
        let mut row_mrr = Vec::new();
        let mut row_hit = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line `{line}`")));
            }
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("line `{line}`")));
            let parse_f = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line `{line}`")));
            let (t, s) = (parse_usize(f[0])?, parse_usize(f[1])?);
            if t != m.mrr.len() || s != row_mrr.len() {
                return Err(bad(format!("entry ({t},{s}) out of order")));
            }
            row_mrr.push(parse_f(f[2])?);
            row_hit.push(parse_f(f[3])?);
            if s == t {
                m.push_row(std::mem::take(&mut row_mrr), std::mem::take(&mut row_hit))?;
            }
        }
        if !row_mrr.is_empty() {
            return Err(bad("incomplete final row".into()));
        }
        Ok(m)
    }

    fn check_row(&self, n: usize) -> Result<()> {
        if n >= self.mrr.len() {
            return Err(contract(format!("session row {n} not available")));
        }
        Ok(())
    }
}

/// Mean of `row[n][0..=n]`.
pub fn average_performance(r: &[Vec<f64>], n: usize) -> Result<f64> {
    let row = r.get(n).ok_or_else(|| contract(format!("row {n} missing")))?;
    if row.len() < n + 1 {
        return Err(contract(format!("row {n} incomplete")));
    }
    Ok(row[..=n].iter().sum::<f64>() / (n + 1) as f64)
}

/// `(1/n) sum_{s<n} (r[n][s] - r[s][s])`; zero when `n == 0`.
pub fn backward_transfer(r: &[Vec<f64>], n: usize) -> Result<f64> {
    average_performance(r, n)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (0..n).map(|s| r[n][s] - r[s][s]).sum();
    Ok(sum / n as f64)
}

/// `(1/n) sum_{s=1..=n} r[s][s]`; the initial slice is excluded.
pub fn forward_diagonal(r: &[Vec<f64>], n: usize) -> Result<f64> {
    average_performance(r, n)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = (1..=n).map(|s| r[s][s]).sum();
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub ap: f64,
    pub bwt: f64,
    pub fwt_diag: f64,
    pub diagonal: Vec<f64>,
    pub final_row: Vec<f64>,
    pub sessions: usize,
    pub seed: u64,
    pub elapsed_secs: f64,
    pub config: serde_json::Value,
}

pub const REPORT_SCHEMA: &str = "report_v1";

impl RunReport {
    /// Aggregates from the MRR matrix through its last complete row.
    pub fn from_matrix(m: &ResultsMatrix, seed: u64, elapsed_secs: f64, config: serde_json::Value) -> Result<Self> {
        let n = m
            .last_session()
            .ok_or_else(|| contract("empty results matrix"))?;
        m.check_row(n)?;
        Ok(Self {
            schema: REPORT_SCHEMA.to_string(),
            ap: average_performance(&m.mrr, n)?,
            bwt: backward_transfer(&m.mrr, n)?,
            fwt_diag: forward_diagonal(&m.mrr, n)?,
            diagonal: m.diagonal(),
            final_row: m.mrr[n].clone(),
            sessions: n + 1,
            seed,
            elapsed_secs,
            config,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Format {
                what: "report",
                detail: format!("unknown schema `{}`", r.schema),
            });
        }
        Ok(r)
    }
}

/// Write `results.csv` and `report.json` into `dir`.
pub fn emit_report(dir: &Path, m: &ResultsMatrix, report: &RunReport) -> Result<()> {
    std::fs::write(dir.join("results.csv"), m.to_csv())?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_metrics() {
        let ranked = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];
        assert_eq!(reciprocal_rank(&ranked, &[5], 10).unwrap(), 1.0);
        assert!((reciprocal_rank(&ranked, &[7], 10).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(reciprocal_rank(&ranked, &[15], 10).unwrap(), 0.0);
        assert_eq!(hit(&ranked, &[14], 10).unwrap(), 1.0);
        assert_eq!(hit(&ranked, &[15], 10).unwrap(), 0.0);
        assert!(hit(&ranked, &[5], 0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let r = vec![vec![0.9], vec![0.5, 0.6], vec![0.2, 0.4, 0.6]];
        assert!((average_performance(&r, 2).unwrap() - 0.4).abs() < 1e-12);
        let c = vec![vec![0.3], vec![0.3, 0.3]];
        assert!((average_performance(&c, 1).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(backward_transfer(&c, 1).unwrap(), 0.0);
        let hand = vec![vec![0.8], vec![0.3, 0.5]];
        assert!((backward_transfer(&hand, 1).unwrap() + 0.5).abs() < 1e-12);
        let d = vec![vec![0.1], vec![0.0, 0.6], vec![0.0, 0.0, 0.8]];
        assert!((forward_diagonal(&d, 2).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut m = ResultsMatrix::new();
        m.push_row(vec![0.5], vec![0.75]).unwrap();
        m.push_row(vec![0.125, 1.0 / 3.0], vec![0.25, 0.5]).unwrap();
        let csv = m.to_csv();
        assert_eq!(ResultsMatrix::from_csv(&csv).unwrap(), m);
        assert!(m.push_row(vec![0.1], vec![0.1]).is_err());
        assert!(ResultsMatrix::from_csv("session,slice,mrr10,hit10\n0,0,0.5,0.5\n1,0,0.5,0.5\n").is_err());
    }
}
