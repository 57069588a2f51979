//! Session pipeline: base co-training, backbone adaptation, memory tuning,
//! and evaluation over seen slices.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Adaptation, ExperimentConfig, Protocol};
use super::corpus::{make_synthetic_corpus, Corpus, QueryKind, QueryRecord};
use super::split::{split_corpus, ContinualSplit};
use crate::backbone::{
    mean_nll, train_nll, GenIRModel, HiddenCorrection, PairKind, SupervisionPair, Token, TrainConfig, TrainLog,
};
use crate::docid::{collision_rate, DocKey, Docid, DocidScheme, PQCodebook};
use crate::error::{contract, Error, Result};
use crate::metrics::{hit, reciprocal_rank};
use crate::pamt::{
    collect_session_accesses, prepare_examples, stage2_train, AccessLog, SelectionConfig, SessionStats,
    Stage2Report, TuningData, UpdatePlan,
};
use crate::pmh::{MemoryBias, MemoryHead};
use crate::trie::{constrained_beam_search, PrefixTrie, ScoreHook};

/// Independent RNG streams of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    Corpus = 1,
    Codebook,
    ModelInit,
    MemoryInit,
    Training,
    Adapter,
    Validation,
    Tuning,
}

/// Seed for `stream` in `session`, derived from the experiment seed.
pub fn stream_seed(seed: u64, session: usize, stream: Stream) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((session as u64).to_le_bytes());
    h.update([stream as u8]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Corpus, split and identifiers of one experiment. Everything here is a
/// pure function of the configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    corpus: Corpus,
    split: ContinualSplit,
    codebook: Option<PQCodebook>,
    /// Indexed by document key.
    docids: Vec<Docid>,
}

/// Model state after a session.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub t: usize,
    pub model: GenIRModel,
    pub head: Option<MemoryHead>,
    /// Historical access counts; present whenever the memory head is.
    pub log: Option<AccessLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Summary {
    pub accessed_rows: usize,
    pub protected_rows: usize,
    pub update_rows: usize,
    pub epoch_loss: Vec<f64>,
}

/// What happened in one session, for logs and reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub t: usize,
    pub train_pairs: usize,
    pub epoch_nll: Vec<f64>,
    /// Mean token NLL on the held-out share of this session's queries.
    pub validation_nll: Option<f64>,
    pub stage2: Option<Stage2Summary>,
}

/// Ranking outcome of one test query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub query: u32,
    pub ranked: Vec<Vec<Token>>,
    pub reciprocal_rank: f64,
    pub hit: f64,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = make_synthetic_corpus(
            &config.corpus,
            config.vocab(),
            stream_seed(config.seed, 0, Stream::Corpus),
        )?;
        Self::from_corpus(config, corpus, None)
    }

    /// Rebuild from a stored corpus; a stored codebook is used as-is instead
    /// of being refitted.
    pub fn from_corpus(config: ExperimentConfig, corpus: Corpus, codebook: Option<PQCodebook>) -> Result<Self> {
        config.validate()?;
        for (i, d) in corpus.docs.iter().enumerate() {
            if d.key as usize != i {
                return Err(Error::Config(format!("document {i} has key {}", d.key)));
            }
        }
        let split = split_corpus(&corpus.docs, &corpus.queries, config.corpus.slices)?;
        let (codebook, docids) = match config.docid.scheme {
            DocidScheme::Spq => {
                let cb = match codebook {
                    Some(cb) => cb,
                    None => {
                        let first: Vec<&[f64]> = split.slices[0]
                            .iter()
                            .map(|&k| corpus.docs[k as usize].embedding.as_slice())
                            .collect();
                        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, 0, Stream::Codebook));
                        PQCodebook::fit(
                            &first,
                            config.docid.subspaces,
                            config.docid.centroids,
                            "initial-slice",
                            &mut rng,
                        )?
                    }
                };
                let ids = corpus
                    .docs
                    .iter()
                    .map(|d| Docid::spq(&cb, &d.embedding))
                    .collect::<Result<Vec<_>>>()?;
                (Some(cb), ids)
            }
            DocidScheme::Tu => {
                let ids = corpus
                    .docs
                    .iter()
                    .map(|d| crate::docid::tu_encode(&d.title, &d.url_path, d.domain, config.docid.tu_cap))
                    .collect::<Result<Vec<_>>>()?;
                (None, ids)
            }
        };
        Ok(Self {
            config,
            corpus,
            split,
            codebook,
            docids,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn split(&self) -> &ContinualSplit {
        &self.split
    }

    pub fn codebook(&self) -> Option<&PQCodebook> {
        self.codebook.as_ref()
    }

    pub fn docid(&self, key: DocKey) -> &Docid {
        &self.docids[key as usize]
    }

    pub fn docids(&self) -> &[Docid] {
        &self.docids
    }

    /// Index of the last session.
    pub fn last_session(&self) -> usize {
        self.split.sessions() - 1
    }

    pub fn collision_rate(&self) -> Result<f64> {
        let seqs: Vec<&[Token]> = self.docids.iter().map(|d| d.tokens.as_slice()).collect();
        collision_rate(&seqs)
    }

    /// Trie over the identifiers of the given slices.
    pub fn trie_over(&self, slices: impl IntoIterator<Item = usize>) -> Result<PrefixTrie> {
        let mut trie = PrefixTrie::new();
        for s in slices {
            for &k in &self.split.slices[s] {
                trie.insert(&self.docid(k).decode_sequence(), k)?;
            }
        }
        Ok(trie)
    }

    /// `T(D_0..t)`.
    pub fn cumulative_trie(&self, t: usize) -> Result<PrefixTrie> {
        self.trie_over(0..=t)
    }

    /// Decoding trie for evaluation after session `t`.
    pub fn eval_trie(&self, protocol: Protocol, t: usize) -> Result<PrefixTrie> {
        match protocol {
            Protocol::Expanded => self.cumulative_trie(t),
            Protocol::Fixed => self.cumulative_trie(self.last_session()),
        }
    }

    /// Decode sequences of every document relevant to `q`.
    pub fn gold_sequences(&self, q: &QueryRecord) -> Vec<Vec<Token>> {
        q.relevant
            .iter()
            .map(|&k| self.docid(k).decode_sequence())
            .collect()
    }

    /// Training queries of slice `t`, split into (train, validation).
    pub fn session_queries(&self, t: usize) -> (Vec<&QueryRecord>, Vec<&QueryRecord>) {
        let mut qs: Vec<&QueryRecord> = self.split.train[t].iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, t, Stream::Validation));
        qs.shuffle(&mut rng);
        let held = (self.config.corpus.validation_frac * qs.len() as f64).floor() as usize;
        let val = qs.split_off(qs.len() - held);
        qs.sort_by_key(|q| q.id);
        (qs, val)
    }

    fn query_pairs(&self, queries: &[&QueryRecord]) -> Vec<SupervisionPair> {
        let mut out = Vec::new();
        for q in queries {
            let kind = match q.kind {
                QueryKind::Real => PairKind::Query2Docid,
                QueryKind::Pseudo => PairKind::PseudoQuery2Docid,
            };
            for gold in self.gold_sequences(q) {
                out.push(SupervisionPair::new(q.tokens.clone(), gold, kind));
            }
        }
        out
    }

    /// Indexing pairs for the slice's documents plus its training queries.
    pub fn training_pairs(&self, t: usize) -> Vec<SupervisionPair> {
        let mut pairs: Vec<SupervisionPair> = self.split.slices[t]
            .iter()
            .map(|&k| {
                SupervisionPair::new(
                    self.corpus.docs[k as usize].content.clone(),
                    self.docid(k).decode_sequence(),
                    PairKind::Doc2Docid,
                )
            })
            .collect();
        pairs.extend(self.query_pairs(&self.session_queries(t).0));
        pairs
    }

    pub fn validation_pairs(&self, t: usize) -> Vec<SupervisionPair> {
        self.query_pairs(&self.session_queries(t).1)
    }

    /// Current-session queries used for access collection and memory tuning.
    pub fn tuning_data(&self, t: usize) -> TuningData {
        let mut data = TuningData::new(t);
        for q in self.session_queries(t).0 {
            for gold in self.gold_sequences(q) {
                data.push(q.id, q.tokens.clone(), gold);
            }
        }
        data
    }

    fn access_queries(&self, t: usize) -> Vec<(u32, Vec<Token>)> {
        self.session_queries(t)
            .0
            .into_iter()
            .map(|q| (q.id, q.tokens.clone()))
            .collect()
    }

    fn train_config(&self, base: &TrainConfig, t: usize) -> TrainConfig {
        TrainConfig {
            seed: stream_seed(self.config.seed ^ base.seed, t, Stream::Training),
            ..*base
        }
    }

    fn validation_nll(&self, model: &GenIRModel, head: Option<&MemoryHead>, t: usize) -> Result<Option<f64>> {
        let pairs = self.validation_pairs(t);
        if pairs.is_empty() {
            return Ok(None);
        }
        let nll = mean_nll(model, head.map(|h| h as &dyn HiddenCorrection), &pairs)?;
        info!("session {t}: validation NLL {nll:.5}");
        Ok(Some(nll))
    }

    /// Session 0: co-train backbone and memory head on the initial slice
    /// with NLL, freeze addressing, and seed the access history with a
    /// greedy pass over the initial slice's queries.
    pub fn train_base(&self) -> Result<(SessionState, SessionOutcome)> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, Stream::ModelInit));
        let mut model = GenIRModel::new(cfg.backbone.clone(), &mut rng)?;
        let mut head = if cfg.memory.enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, Stream::MemoryInit));
            Some(MemoryHead::new(cfg.pmh_config(), &mut rng)?)
        } else {
            None
        };
        let pairs = self.training_pairs(0);
        info!("session 0: training on {} pairs", pairs.len());
        let log = train_nll(
            &mut model,
            head.as_mut().map(|h| h as &mut dyn HiddenCorrection),
            &pairs,
            &self.train_config(&cfg.base_training, 0),
        )?;
        let mut access = None;
        if let Some(h) = head.as_mut() {
            h.freeze_addressing();
            let trie = self.cumulative_trie(0)?;
            let records = collect_session_accesses(&model, h, &trie, &self.access_queries(0), 1, cfg.max_decode_len())?;
            let mut l = AccessLog::new(h.config().rows());
            l.update(&records)?;
            access = Some(l);
        }
        let outcome = SessionOutcome {
            t: 0,
            train_pairs: pairs.len(),
            epoch_nll: log.epoch_nll,
            validation_nll: self.validation_nll(&model, head.as_ref(), 0)?,
            stage2: None,
        };
        Ok((
            SessionState {
                t: 0,
                model,
                head,
                log: access,
            },
            outcome,
        ))
    }

    /// Backbone adaptation on slice `t` from the previous state. The memory
    /// head is read but never written.
    pub fn stage1(&self, prev: &SessionState) -> Result<(SessionState, SessionOutcome)> {
        let cfg = &self.config;
        let t = prev.t + 1;
        if t > self.last_session() {
            return Err(Error::Lifecycle(format!("no slice for session {t}")));
        }
        let mut model = prev.model.clone();
        if cfg.adaptation.mode == Adaptation::LowRank && model.adapter().is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, t, Stream::Adapter));
            model.attach_adapter(cfg.adaptation.rank, cfg.adaptation.alpha, &mut rng)?;
        }
        let mut frozen = prev.head.clone();
        if let Some(h) = frozen.as_mut() {
            h.params_mut().freeze_all();
        }
        let pairs = self.training_pairs(t);
        info!("session {t}: adapting on {} pairs", pairs.len());
        let log: TrainLog = train_nll(
            &mut model,
            frozen.as_mut().map(|h| h as &mut dyn HiddenCorrection),
            &pairs,
            &self.train_config(&cfg.adaptation.train, t),
        )?;
        let outcome = SessionOutcome {
            t,
            train_pairs: pairs.len(),
            epoch_nll: log.epoch_nll,
            validation_nll: self.validation_nll(&model, prev.head.as_ref(), t)?,
            stage2: None,
        };
        Ok((
            SessionState {
                t,
                model,
                head: prev.head.clone(),
                log: prev.log.clone(),
            },
            outcome,
        ))
    }

    /// Memory tuning after adaptation: collect accesses on the session's
    /// queries, choose rows, update them, then fold the accesses into the
    /// history.
    pub fn stage2(&self, state: &mut SessionState, selection: &SelectionConfig) -> Result<(Stage2Summary, UpdatePlan)> {
        let t = state.t;
        let (Some(head), Some(log)) = (state.head.as_mut(), state.log.as_mut()) else {
            return Err(Error::Config("memory tuning needs the memory head".into()));
        };
        let trie = self.cumulative_trie(t)?;
        let records = collect_session_accesses(
            &state.model,
            head,
            &trie,
            &self.access_queries(t),
            selection.access_beam,
            self.config.max_decode_len(),
        )?;
        let stats = SessionStats::from_records(&records, head.config().rows())?;
        let plan = UpdatePlan::build(log, &stats, selection, head.config().capacity)?;
        let examples = prepare_examples(&state.model, head, &trie, &self.tuning_data(t))?;
        let report: Stage2Report = stage2_train(
            head,
            state.model.embedding(),
            &examples,
            &plan,
            selection,
            stream_seed(self.config.seed, t, Stream::Tuning),
        )?;
        log.update(&records)?;
        let summary = Stage2Summary {
            accessed_rows: stats.counts.iter().filter(|&&c| c > 0).count(),
            protected_rows: plan.protected.len(),
            update_rows: report.updated_rows,
            epoch_loss: report.epoch_loss,
        };
        info!(
            "session {t}: tuned {} rows ({} accessed, {} protected)",
            summary.update_rows, summary.accessed_rows, summary.protected_rows
        );
        Ok((summary, plan))
    }

    /// Rank test queries under `trie` with the memory bias active when a
    /// head is given.
    pub fn evaluate_queries(
        &self,
        model: &GenIRModel,
        head: Option<&MemoryHead>,
        trie: &PrefixTrie,
        queries: &[QueryRecord],
    ) -> Result<Vec<QueryOutcome>> {
        let run = &self.config.run;
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let mut bias = head.map(|h| MemoryBias::new(h, model.embedding()));
            let ranked = constrained_beam_search(
                model,
                &q.tokens,
                trie,
                run.beam,
                bias.as_mut().map(|b| b as &mut dyn ScoreHook),
                self.config.max_decode_len(),
            )?;
            let ranked: Vec<Vec<Token>> = ranked.into_iter().map(|r| r.tokens).collect();
            let gold = self.gold_sequences(q);
            out.push(QueryOutcome {
                query: q.id,
                reciprocal_rank: reciprocal_rank(&ranked, &gold, run.cutoff)?,
                hit: hit(&ranked, &gold, run.cutoff)?,
                ranked,
            });
        }
        Ok(out)
    }

    /// Mean (MRR, Hit) of slice `s` test queries under `trie`.
    pub fn evaluate_slice(&self, state: &SessionState, trie: &PrefixTrie, s: usize) -> Result<(f64, f64)> {
        let qs = &self.split.test[s];
        let res = self.evaluate_queries(&state.model, state.head.as_ref(), trie, qs)?;
        if res.is_empty() {
            return Ok((0.0, 0.0));
        }
        let n = res.len() as f64;
        Ok((
            res.iter().map(|r| r.reciprocal_rank).sum::<f64>() / n,
            res.iter().map(|r| r.hit).sum::<f64>() / n,
        ))
    }

    /// Row `t` of the results matrix: every seen slice under `protocol`.
    pub fn evaluate_row(&self, state: &SessionState, protocol: Protocol) -> Result<(Vec<f64>, Vec<f64>)> {
        let trie = self.eval_trie(protocol, state.t)?;
        let mut mrr = Vec::with_capacity(state.t + 1);
        let mut hits = Vec::with_capacity(state.t + 1);
        for s in 0..=state.t {
            let (m, h) = self.evaluate_slice(state, &trie, s)?;
            mrr.push(m);
            hits.push(h);
        }
        info!("session {} ({protocol:?}): MRR@10 {mrr:.3?}", state.t);
        Ok((mrr, hits))
    }

    /// Check that a state belongs to this experiment's shapes.
    pub fn check_state(&self, state: &SessionState) -> Result<()> {
        if state.model.config() != &self.config.backbone {
            return Err(contract("checkpoint backbone config differs from the experiment"));
        }
        if self.config.memory.enabled != state.head.is_some() {
            return Err(contract("checkpoint memory head presence differs from the experiment"));
        }
        Ok(())
    }
}

/// Hit@10 numbers of the frozen-trie and zero-shot controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    /// Hit@10 on the initial slice's test queries decoding over its own trie.
    pub initial_hit: f64,
    /// Same, decoding over `T(D_0..t)` for `t = 1..=n`.
    pub expanded_hit: Vec<f64>,
    /// `initial_hit - expanded_hit[t]`.
    pub frozen_drop: Vec<f64>,
    /// Hit@10 on slice `t` test queries decoding only over slice `t`.
    pub zero_shot: Vec<f64>,
    pub zero_shot_avg: f64,
    pub collision_rate: f64,
}

impl ControlReport {
    /// Drop with every identifier in the trie.
    pub fn final_frozen_drop(&self) -> f64 {
        self.frozen_drop.last().copied().unwrap_or(0.0)
    }
}

/// Search-space controls on the session-0 state; no parameter changes.
pub fn run_controls(exp: &Experiment, base: &SessionState) -> Result<ControlReport> {
    if base.t != 0 {
        return Err(Error::Lifecycle("controls need the session-0 state".into()));
    }
    let n = exp.last_session();
    let (_, initial_hit) = exp.evaluate_slice(base, &exp.cumulative_trie(0)?, 0)?;
    let mut expanded_hit = Vec::with_capacity(n);
    for t in 1..=n {
        expanded_hit.push(exp.evaluate_slice(base, &exp.cumulative_trie(t)?, 0)?.1);
    }
    let mut zero_shot = Vec::with_capacity(n);
    for t in 1..=n {
        zero_shot.push(exp.evaluate_slice(base, &exp.trie_over([t])?, t)?.1);
    }
    let zero_shot_avg = if n == 0 {
        0.0
    } else {
        zero_shot.iter().sum::<f64>() / n as f64
    };
    Ok(ControlReport {
        initial_hit,
        frozen_drop: expanded_hit.iter().map(|h| initial_hit - h).collect(),
        expanded_hit,
        zero_shot,
        zero_shot_avg,
        collision_rate: exp.collision_rate()?,
    })
}

/// Results of sessions `1..=n` run in memory from a shared base state.
#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub matrices: BTreeMap<Protocol, crate::metrics::ResultsMatrix>,
    pub outcomes: Vec<SessionOutcome>,
    pub final_state: SessionState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub stage2: bool,
    pub selection: SelectionConfig,
    pub protocols: Vec<Protocol>,
}

impl RunOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            stage2: cfg.run.stage2 && cfg.memory.enabled,
            selection: cfg.selection,
            protocols: vec![cfg.run.protocol],
        }
    }
}

/// Run every later session from `base` and evaluate each one.
pub fn run_continual(exp: &Experiment, base: &SessionState, opts: &RunOptions) -> Result<ContinualRun> {
    if base.t != 0 {
        return Err(Error::Lifecycle("a continual run starts from session 0".into()));
    }
    let mut matrices = BTreeMap::new();
    for &p in &opts.protocols {
        let (m, h) = exp.evaluate_row(base, p)?;
        let mut r = crate::metrics::ResultsMatrix::new();
        r.push_row(m, h)?;
        matrices.insert(p, r);
    }
    let mut outcomes = Vec::new();
    let mut state = base.clone();
    for _ in 1..=exp.last_session() {
        let (mut next, mut outcome) = exp.stage1(&state)?;
        if opts.stage2 {
            let (summary, _) = exp.stage2(&mut next, &opts.selection)?;
            outcome.stage2 = Some(summary);
        }
        for &p in &opts.protocols {
            let (m, h) = exp.evaluate_row(&next, p)?;
            matrices.get_mut(&p).expect("protocol row").push_row(m, h)?;
        }
        outcomes.push(outcome);
        state = next;
    }
    Ok(ContinualRun {
        matrices,
        outcomes,
        final_state: state,
    })
}

/// One cell of the protected-fraction by budget grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub protected_frac: f64,
    pub budget: usize,
    pub ap: f64,
    pub fwt_diag: f64,
    pub bwt: f64,
}

/// One full continual run with memory tuning per `(p, m)` cell, sharing the
/// base state and seed.
pub fn sensitivity_sweep(
    exp: &Experiment,
    base: &SessionState,
    protected_grid: &[f64],
    budget_grid: &[usize],
) -> Result<Vec<SweepRow>> {
    let n = exp.last_session();
    let protocol = exp.config().run.protocol;
    let mut rows = Vec::new();
    for &p in protected_grid {
        for &m in budget_grid {
            let selection = SelectionConfig {
                protected_frac: p,
                budget: m,
                ..exp.config().selection
            };
            let run = run_continual(
                exp,
                base,
                &RunOptions {
                    stage2: true,
                    selection,
                    protocols: vec![protocol],
                },
            )?;
            let r = &run.matrices[&protocol].mrr;
            let row = SweepRow {
                protected_frac: p,
                budget: m,
                ap: crate::metrics::average_performance(r, n)?,
                fwt_diag: crate::metrics::forward_diagonal(r, n)?,
                bwt: crate::metrics::backward_transfer(r, n)?,
            };
            info!("sweep p={p} m={m}: {row:?}");
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Tab-separated sweep table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("p\tm\tap\tfwt_diag\tbwt\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.protected_frac, r.budget, r.ap, r.fwt_diag, r.bwt
        ));
    }
    out
}
