//! Exact checks shared by the acceptance runner and the regular test suite.
//! Each returns whether it passed and a one-line summary.

use std::collections::BTreeSet;

use pamt::backbone::Token;
use pamt::harness::Experiment;
use pamt::metrics::{average_performance, backward_transfer, forward_diagonal};
use pamt::pamt::{
    prepare_examples, stage2_train, AccessLog, SelectionConfig, SessionStats, TuningData, UpdatePlan,
};
use pamt::pmh::{record_access, AccessRecord, MemoryBias, MemoryHead, PmhConfig};
use pamt::trie::{constrained_beam_search, sequence_log_prob, ScoreHook};
use pamt::Result;
use rand::Rng;

use super::fixtures::{
    head_queries, random_docids, random_head, random_spq_docids, small_model, tiny_config, trie_of, RandomHook,
    ToyDecoder,
};
use super::{
    brute_force_top_rows, model_grad_error, ops, random_triangle, reference_ap, reference_bwt, reference_fwt, rng,
    GRAD_REL_TOL,
};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

fn check(pass: bool, detail: String) -> Result<Check> {
    Ok(Check { pass, detail })
}

pub const GRAD_SEEDS: u64 = 100;

pub fn gradients() -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    for case in ops::all() {
        for s in 0..GRAD_SEEDS {
            let e = (case.check)(s)?;
            if e > worst {
                worst = e;
                worst_op = case.name;
            }
        }
    }
    let model = (0..3).map(|s| model_grad_error(s, 2)).collect::<Result<Vec<_>>>()?;
    let model_worst = model.into_iter().fold(0.0, f64::max);
    check(
        worst <= GRAD_REL_TOL && model_worst <= GRAD_REL_TOL,
        format!(
            "{} ops x {GRAD_SEEDS} seeds, worst rel err {worst:.2e} ({worst_op}); full model {model_worst:.2e}",
            ops::all().len()
        ),
    )
}

pub const ADDRESS_INSTANCES: usize = 1000;

pub fn addressing() -> Result<Check> {
    let mut r = rng(2);
    let mut mismatches = 0;
    for _ in 0..ADDRESS_INSTANCES {
        let sub_keys = r.random_range(1..=32);
        let top_k = r.random_range(1..=sub_keys.min(16));
        let heads = r.random_range(1..=3);
        let key_dim = 2 * r.random_range(1..=4);
        let hidden = r.random_range(2..=8);
        let config = PmhConfig {
            heads,
            key_dim,
            sub_keys,
            top_k,
            hidden,
            capacity: sub_keys * sub_keys,
        };
        let head = random_head(&mut r, config);
        let k1 = head.params().value(pamt::pmh::KEYS1)?.clone();
        let k2 = head.params().value(pamt::pmh::KEYS2)?.clone();
        let x: Vec<f64> = (0..hidden).map(|_| r.random_range(-1.0..1.0)).collect();
        let selections = head.address(&x)?;
        for (h, sel) in selections.iter().enumerate() {
            let (z1, z2) = head_queries(&head, &x, h);
            let expected = brute_force_top_rows(&z1, &z2, &k1, &k2, top_k);
            let got: BTreeSet<usize> = sel.rows.iter().copied().collect();
            if got != expected {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("{ADDRESS_INSTANCES} instances, {mismatches} head selections differ from brute force"),
    )
}

pub const TRIE_DECODES: usize = 10_000;

pub fn trie_fuzz() -> Result<Check> {
    let mut r = rng(3);
    let mut violations = 0;
    let mut returned = 0;
    let mut i = 0;
    while i < TRIE_DECODES {
        let max_len = r.random_range(1..=5);
        let (count, alphabet) = (r.random_range(1..=40), r.random_range(1..=6));
        let docids = random_docids(&mut r, count, alphabet, max_len);
        let trie = trie_of(&docids);
        let model = ToyDecoder { seed: r.random() };
        for _ in 0..100 {
            let q: Vec<Token> = (0..3).map(|_| r.random_range(2..50)).collect();
            let beam = r.random_range(1..=8);
            let mut hook = RandomHook {
                rng: rng(r.random()),
                scale: r.random_range(0.0..10.0),
            };
            let out = constrained_beam_search(&model, &q, &trie, beam, Some(&mut hook as &mut dyn ScoreHook), max_len)?;
            returned += out.len();
            let distinct: BTreeSet<&Vec<Token>> = out.iter().map(|d| &d.tokens).collect();
            if distinct.len() != out.len() || out.len() > beam {
                violations += 1;
            }
            for d in &out {
                let keys: Option<Vec<_>> = trie.terminal_keys(&d.tokens).map(|k| k.iter().copied().collect());
                if keys.as_ref() != Some(&d.keys) {
                    violations += 1;
                }
            }
            i += 1;
        }
    }
    check(
        violations == 0,
        format!("{TRIE_DECODES} decodes, {returned} identifiers returned, {violations} violations"),
    )
}

pub fn beam_exhaustive() -> Result<Check> {
    let mut r = rng(4);
    let instances = 20;
    let mut mismatches = 0;
    for i in 0..instances {
        let vocab = 24;
        let model = small_model(100 + i, vocab);
        let head = random_head(&mut r, PmhConfig::for_capacity(2, 4, 2, 16, 25));
        let count = r.random_range(2..=32);
        let docids = random_spq_docids(&mut r, count, 8, 3);
        let trie = trie_of(&docids);
        let q: Vec<Token> = (0..4).map(|_| r.random_range(12..vocab as u32)).collect();
        let mut bias = MemoryBias::new(&head, model.embedding());
        let beam = constrained_beam_search(&model, &q, &trie, trie.len(), Some(&mut bias), 4)?;
        let mut exhaustive: Vec<(Vec<Token>, f64)> = trie
            .entries()
            .into_iter()
            .map(|(seq, _)| {
                let mut bias = MemoryBias::new(&head, model.embedding());
                let lp = sequence_log_prob(&model, &q, &trie, &seq, Some(&mut bias))?;
                Ok((seq, lp))
            })
            .collect::<Result<_>>()?;
        exhaustive.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let same = beam.len() == exhaustive.len()
            && beam
                .iter()
                .zip(&exhaustive)
                .all(|(b, e)| b.tokens == e.0 && (b.log_prob - e.1).abs() <= 1e-9);
        if !same {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{instances} instances with beam = corpus size, {mismatches} rankings differ"),
    )
}

/// Six-session pipeline on a tiny configuration; Stage 2 touches only the
/// selected value rows.
pub fn masking() -> Result<Check> {
    let exp = Experiment::build(tiny_config(5))?;
    let (mut state, _) = exp.train_base()?;
    let mut violations = Vec::new();
    let mut updated = 0;
    for t in 1..=exp.last_session() {
        let (mut next, _) = exp.stage1(&state)?;
        let model_before = next.model.params().digest();
        let head_before = next.head.clone().expect("memory enabled");
        let (_, plan) = exp.stage2(&mut next, &exp.config().selection)?;
        let head = next.head.as_ref().expect("memory enabled");
        if next.model.params().digest() != model_before {
            violations.push(format!("session {t}: backbone changed"));
        }
        if head.addressing_digest() != head_before.addressing_digest() {
            violations.push(format!("session {t}: addressing changed"));
        }
        for row in 0..head.values().rows() {
            let same = head.values().row(row) == head_before.values().row(row);
            if !plan.update.contains(&row) && !same {
                violations.push(format!("session {t}: row {row} outside the update set changed"));
            }
        }
        if plan.protected.intersection(&plan.update).next().is_some() {
            violations.push(format!("session {t}: protected and update sets overlap"));
        }
        updated += plan.update.len();
        state = next;
    }
    check(
        violations.is_empty(),
        format!(
            "{} sessions, {updated} rows updated in total, violations {violations:?}",
            exp.last_session() + 1
        ),
    )
}

fn reference_plan(
    hist: &[u64],
    total: u64,
    counts: &[u64],
    p: f64,
    budget: usize,
    capacity: usize,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let n = hist.len();
    let mut by_hist: Vec<usize> = (0..n).collect();
    by_hist.sort_by(|&a, &b| hist[b].cmp(&hist[a]).then(a.cmp(&b)));
    let protected: BTreeSet<usize> = by_hist[..(p * n as f64).floor() as usize].iter().copied().collect();
    let sum: u64 = counts.iter().sum();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for row in 0..capacity.min(n) {
        if protected.contains(&row) || sum == 0 {
            continue;
        }
        let freq = counts[row] as f64 / sum as f64;
        let ihf = ((total as f64 + 1.0) / (hist[row] as f64 + 1.0)).ln();
        let s = freq * ihf;
        if s > 0.0 {
            scored.push((s, row));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let update = scored.into_iter().take(budget).map(|(_, r)| r).collect();
    (protected, update)
}

fn random_records(r: &mut impl Rng, count: usize, rows: usize, hot: usize) -> Vec<AccessRecord> {
    (0..count)
        .map(|q| {
            let steps = (0..r.random_range(1..=4))
                .map(|_| {
                    (0..r.random_range(1..=8))
                        .map(|_| {
                            // a hot region gives repeated rows and ties
                            if r.random_bool(0.5) {
                                r.random_range(0..hot)
                            } else {
                                r.random_range(0..rows)
                            }
                        })
                        .collect()
                })
                .collect();
            record_access(q as u32, steps)
        })
        .collect()
}

pub const SELECTION_ROWS: usize = 10_000;

pub fn selection() -> Result<Check> {
    let mut r = rng(6);
    let trials = 20;
    let mut mismatches = 0;
    for trial in 0..trials {
        let mut log = AccessLog::new(SELECTION_ROWS);
        let history = random_records(&mut r, 2000, SELECTION_ROWS, 300);
        log.update(&history)?;
        let session = random_records(&mut r, 500, SELECTION_ROWS, 600);
        let stats = SessionStats::from_records(&session, SELECTION_ROWS)?;
        let p = [0.0, 0.01, 0.1, 0.3][trial % 4];
        let budget = r.random_range(1..=3000);
        let capacity = r.random_range(9000..=SELECTION_ROWS);
        let config = SelectionConfig {
            protected_frac: p,
            budget,
            ..pamt::harness::ExperimentConfig::desk(0).selection
        };
        let plan = UpdatePlan::build(&log, &stats, &config, capacity)?;
        let (protected, update) = reference_plan(log.hist(), log.total_queries(), &stats.counts, p, budget, capacity);
        if plan.protected != protected || plan.update != update {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{trials} trials over {SELECTION_ROWS} rows, {mismatches} differ from the full-sort reference"),
    )
}

pub fn metric_formulas() -> Result<Check> {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(0..8);
        let m = random_triangle(&mut r, n);
        worst = worst
            .max((average_performance(&m, n)? - reference_ap(&m, n)).abs())
            .max((backward_transfer(&m, n)? - reference_bwt(&m, n)).abs())
            .max((forward_diagonal(&m, n)? - reference_fwt(&m, n)).abs());
    }
    let hand = backward_transfer(&[vec![0.8], vec![0.3, 0.9]], 1)?;
    check(
        worst <= 1e-12 && (hand + 0.5).abs() <= 1e-12,
        format!("20 matrices, worst abs diff {worst:.1e}; hand case BWT {hand:.12}"),
    )
}

pub fn no_op_chain() -> Result<Check> {
    let mut r = rng(8);
    let vocab = 24;
    let mut decode_diffs = 0;
    let mut state_diffs = 0;
    for i in 0..20 {
        let model = small_model(200 + i, vocab);
        let head = MemoryHead::new(PmhConfig::for_capacity(2, 4, 2, 16, 25), &mut r)?;
        let docids = random_spq_docids(&mut r, 30, 8, 3);
        let trie = trie_of(&docids);
        let q: Vec<Token> = (0..4).map(|_| r.random_range(12..vocab as u32)).collect();
        let plain = constrained_beam_search(&model, &q, &trie, 5, None, 4)?;
        let mut bias = MemoryBias::new(&head, model.embedding());
        let biased = constrained_beam_search(&model, &q, &trie, 5, Some(&mut bias), 4)?;
        let bitwise = plain.len() == biased.len()
            && plain
                .iter()
                .zip(&biased)
                .all(|(a, b)| a.tokens == b.tokens && a.log_prob.to_bits() == b.log_prob.to_bits());
        if !bitwise {
            decode_diffs += 1;
        }

        let mut head = random_head(&mut r, *head.config());
        head.freeze_addressing();
        let mut data = TuningData::new(1);
        for (k, (seq, _)) in docids.iter().take(8).enumerate() {
            data.push(k as u32, q.clone(), seq.clone());
        }
        let examples = prepare_examples(&model, &head, &trie, &data)?;
        let plan = UpdatePlan {
            protected: (0..5).collect(),
            update: BTreeSet::new(),
            hist: vec![0; head.config().rows()],
            normalized: vec![0.0; head.config().rows()],
            scores: vec![0.0; head.config().rows()],
        };
        let before = head.params().to_bytes();
        let config = SelectionConfig {
            lr: 1.0,
            ..pamt::harness::ExperimentConfig::desk(0).selection
        };
        stage2_train(&mut head, model.embedding(), &examples, &plan, &config, i)?;
        if head.params().to_bytes() != before {
            state_diffs += 1;
        }
    }
    check(
        decode_diffs == 0 && state_diffs == 0,
        format!("20 cases: {decode_diffs} biased decodes differ, {state_diffs} states changed by empty updates"),
    )
}
