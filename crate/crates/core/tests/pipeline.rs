//! End-to-end behaviour of the session loop on a tiny configuration.

mod common;

use pamt::harness::{
    run_continual, run_controls, sensitivity_sweep, Adaptation, Experiment, Protocol, RunDir, RunOptions,
};
use pamt::metrics::{average_performance, backward_transfer};

use common::fixtures::tiny_config;

fn state_digest(s: &pamt::harness::SessionState) -> (String, String, Vec<u8>) {
    (
        s.model.params().digest(),
        s.head.as_ref().unwrap().params().digest(),
        s.log.as_ref().unwrap().to_bytes(),
    )
}

#[test]
fn interrupted_run_resumes_to_the_same_state() {
    let exp = Experiment::build(tiny_config(11)).unwrap();
    let straight = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();

    let dir = RunDir::create(straight.path(), &exp).unwrap();
    for t in 0..=2 {
        dir.run_session(&exp, t, true, true).unwrap();
    }

    let dir = RunDir::create(resumed.path(), &exp).unwrap();
    dir.run_session(&exp, 0, true, true).unwrap();
    assert!(dir.run_session(&exp, 2, true, true).is_err(), "session 2 before 1");
    dir.run_session(&exp, 1, true, false).unwrap();
    assert!(!dir.is_complete(1), "stage 2 still pending");
    assert!(dir.run_session(&exp, 2, true, true).is_err());
    // a fresh process reopens the directory and finishes
    let (dir, exp2) = RunDir::open(resumed.path()).unwrap();
    dir.run_session(&exp2, 1, false, true).unwrap();
    dir.run_session(&exp2, 2, true, true).unwrap();
    assert_eq!(dir.completed_sessions(), 3);

    let (a, _) = RunDir::open(straight.path()).unwrap();
    for t in 0..=2 {
        assert_eq!(
            state_digest(&a.load_session(t).unwrap()),
            state_digest(&dir.load_session(t).unwrap()),
            "session {t}"
        );
    }
}

#[test]
fn stored_run_matches_in_memory_run_and_protocols_share_states() {
    let exp = Experiment::build(tiny_config(12)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::create(tmp.path(), &exp).unwrap();
    for t in 0..=exp.last_session() {
        dir.run_session(&exp, t, true, true).unwrap();
    }
    let (expanded, _) = dir.evaluate(&exp, Protocol::Expanded).unwrap();
    let (fixed, report) = dir.evaluate(&exp, Protocol::Fixed).unwrap();
    assert!(tmp.path().join("eval_fixed/results.csv").exists());
    assert!(tmp.path().join("eval_expanded/report.json").exists());

    let base = dir.load_session(0).unwrap();
    let mut opts = RunOptions::from_config(exp.config());
    opts.protocols = vec![Protocol::Expanded, Protocol::Fixed];
    let run = run_continual(&exp, &base, &opts).unwrap();
    assert_eq!(run.matrices[&Protocol::Expanded], expanded);
    assert_eq!(run.matrices[&Protocol::Fixed], fixed);

    // at the last session both protocols decode over every identifier
    let n = exp.last_session();
    assert_eq!(expanded.mrr[n], fixed.mrr[n]);
    let bwt = backward_transfer(&fixed.mrr, n).unwrap();
    assert_eq!(report.bwt, bwt);
    assert_eq!(report.ap, average_performance(&fixed.mrr, n).unwrap());
}

#[test]
fn without_stage_two_memory_and_history_stay_put() {
    let mut cfg = tiny_config(13);
    cfg.run.stage2 = false;
    let exp = Experiment::build(cfg).unwrap();
    let (base, _) = exp.train_base().unwrap();
    let run = run_continual(&exp, &base, &RunOptions::from_config(exp.config())).unwrap();
    let last = &run.final_state;
    assert_eq!(
        last.head.as_ref().unwrap().params().digest(),
        base.head.as_ref().unwrap().params().digest()
    );
    assert_eq!(last.log, base.log);
    assert!(run.outcomes.iter().all(|o| o.stage2.is_none()));
}

#[test]
fn low_rank_adaptation_leaves_base_weights_unchanged() {
    let mut cfg = tiny_config(14);
    cfg.adaptation.mode = Adaptation::LowRank;
    cfg.adaptation.rank = 2;
    let exp = Experiment::build(cfg).unwrap();
    let (base, _) = exp.train_base().unwrap();
    let before = base.model.base_params().digest();
    let (s1, _) = exp.stage1(&base).unwrap();
    let (s2, _) = exp.stage1(&s1).unwrap();
    assert_eq!(s2.model.base_params().digest(), before);
    assert!(s2.model.adapter().is_some());
    assert_ne!(s2.model.adapter_params().digest(), s1.model.adapter_params().digest());
}

#[test]
fn matrix_entries_replay_from_per_query_outcomes() {
    let exp = Experiment::build(tiny_config(15)).unwrap();
    let (base, _) = exp.train_base().unwrap();
    let (s1, _) = exp.stage1(&base).unwrap();
    let (mrr, hit) = exp.evaluate_row(&s1, Protocol::Expanded).unwrap();
    let trie = exp.eval_trie(Protocol::Expanded, 1).unwrap();
    for s in 0..=1 {
        let qs = &exp.split().test[s];
        let out = exp.evaluate_queries(&s1.model, s1.head.as_ref(), &trie, qs).unwrap();
        let n = out.len() as f64;
        let rr: f64 = out.iter().map(|o| o.reciprocal_rank).sum::<f64>() / n;
        let h: f64 = out.iter().map(|o| o.hit).sum::<f64>() / n;
        assert_eq!(rr, mrr[s]);
        assert_eq!(h, hit[s]);
        for o in &out {
            assert!(o.hit >= o.reciprocal_rank);
            assert!(o.ranked.iter().all(|seq| trie.contains(seq)));
        }
    }
}

#[test]
fn controls_are_consistent() {
    let exp = Experiment::build(tiny_config(16)).unwrap();
    let (base, _) = exp.train_base().unwrap();
    let c = run_controls(&exp, &base).unwrap();
    let n = exp.last_session();
    assert_eq!(c.expanded_hit.len(), n);
    assert_eq!(c.zero_shot.len(), n);
    for (d, h) in c.frozen_drop.iter().zip(&c.expanded_hit) {
        assert_eq!(*d, c.initial_hit - h);
    }
    assert_eq!(c.final_frozen_drop(), c.initial_hit - c.expanded_hit[n - 1]);
    assert!((0.0..=1.0).contains(&c.zero_shot_avg));
    assert_eq!(c.collision_rate, exp.collision_rate().unwrap());
}

#[test]
fn sweep_covers_the_grid_deterministically() {
    let exp = Experiment::build(tiny_config(17)).unwrap();
    let (base, _) = exp.train_base().unwrap();
    let a = sensitivity_sweep(&exp, &base, &[0.0, 0.1], &[4, 16]).unwrap();
    assert_eq!(a.len(), 4);
    let cells: Vec<(f64, usize)> = a.iter().map(|r| (r.protected_frac, r.budget)).collect();
    assert_eq!(cells, vec![(0.0, 4), (0.0, 16), (0.1, 4), (0.1, 16)]);
    let b = sensitivity_sweep(&exp, &base, &[0.1], &[16]).unwrap();
    assert_eq!(b[0], a[3]);
}
