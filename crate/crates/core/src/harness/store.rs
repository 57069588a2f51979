//! Run directory: corpus artifacts, per-session checkpoints, evaluation
//! outputs. Each checkpoint directory is written under a temporary name and
//! renamed into place, so an interrupted run resumes from the last complete
//! step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{de::DeserializeOwned, Serialize};

use super::config::{ExperimentConfig, Protocol};
use super::corpus::Corpus;
use super::experiment::{Experiment, SessionOutcome, SessionState};
use crate::backbone::{BackboneConfig, GenIRModel};
use crate::docid::{export_docid_map, DocKey, PQCodebook};
use crate::error::{Error, Result};
use crate::metrics::{emit_report, ResultsMatrix, RunReport};
use crate::numerics::ParameterSet;
use crate::pamt::AccessLog;
use crate::pmh::MemoryHead;

const CONFIG: &str = "config.toml";
const CORPUS: &str = "corpus.json";
const CODEBOOK: &str = "codebook.ckpt";
const DOCIDS: &str = "docids.tsv";
const COMPLETE: &str = "COMPLETE";

fn format_err(what: &'static str, e: impl std::fmt::Display) -> Error {
    Error::Format {
        what,
        detail: e.to_string(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err("json", e))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| format_err("json", e))
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Write the configuration and corpus artifacts of `exp` into `root`.
    pub fn create(root: &Path, exp: &Experiment) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        exp.config().save(&root.join(CONFIG))?;
        write_json(&root.join(CORPUS), exp.corpus())?;
        if let Some(cb) = exp.codebook() {
            cb.to_params().save(&root.join(CODEBOOK))?;
        }
        let entries: Vec<(DocKey, _)> = exp
            .docids()
            .iter()
            .enumerate()
            .map(|(k, d)| (k as DocKey, d.clone()))
            .collect();
        std::fs::write(root.join(DOCIDS), export_docid_map(&entries))?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Reopen a directory written by [`RunDir::create`].
    pub fn open(root: &Path) -> Result<(Self, Experiment)> {
        let config = ExperimentConfig::load(&root.join(CONFIG))?;
        let corpus: Corpus = read_json(&root.join(CORPUS))?;
        let codebook = if root.join(CODEBOOK).exists() {
            Some(PQCodebook::from_params(&ParameterSet::load(&root.join(CODEBOOK))?)?)
        } else {
            None
        };
        let exp = Experiment::from_corpus(config, corpus, codebook)?;
        Ok((Self { root: root.to_path_buf() }, exp))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, t: usize) -> PathBuf {
        self.root.join(format!("session_{t}"))
    }

    fn stage1_dir(&self, t: usize) -> PathBuf {
        self.root.join(format!("session_{t}_stage1"))
    }

    pub fn is_complete(&self, t: usize) -> bool {
        self.session_dir(t).join(COMPLETE).exists()
    }

    /// Sessions `0..k` that are complete, stopping at the first gap.
    pub fn completed_sessions(&self) -> usize {
        (0..).take_while(|&t| self.is_complete(t)).count()
    }

    fn save_state(&self, dir: &Path, state: &SessionState, outcome: &SessionOutcome) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        state.model.config().save(&tmp.join("backbone.toml"))?;
        if state.model.adapter().is_some() {
            state.model.adapter_params().save(&tmp.join("adapter.ckpt"))?;
        } else {
            state.model.params().save(&tmp.join("model.ckpt"))?;
        }
        if let Some(h) = &state.head {
            h.save(&tmp)?;
        }
        if let Some(l) = &state.log {
            l.save(&tmp.join("access.log"))?;
        }
        write_json(&tmp.join("outcome.json"), outcome)?;
        std::fs::write(tmp.join(COMPLETE), format!("{}\n", state.t))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    fn load_state(&self, dir: &Path, t: usize) -> Result<SessionState> {
        if !dir.join(COMPLETE).exists() {
            return Err(Error::Lifecycle(format!("no complete checkpoint in {}", dir.display())));
        }
        let config = BackboneConfig::load(&dir.join("backbone.toml"))?;
        let model = if dir.join("adapter.ckpt").exists() {
            let base = ParameterSet::load(&self.session_dir(0).join("model.ckpt"))?;
            let mut m = GenIRModel::from_parts(config, base)?;
            m.load_adapter(&ParameterSet::load(&dir.join("adapter.ckpt"))?)?;
            m
        } else {
            GenIRModel::from_parts(config, ParameterSet::load(&dir.join("model.ckpt"))?)?
        };
        let head = if dir.join("pmh.ckpt").exists() {
            let mut h = MemoryHead::load(dir)?;
            h.freeze_addressing();
            Some(h)
        } else {
            None
        };
        let log = if dir.join("access.log").exists() {
            Some(AccessLog::load(&dir.join("access.log"))?)
        } else {
            None
        };
        Ok(SessionState { t, model, head, log })
    }

    /// State after session `t`.
    pub fn load_session(&self, t: usize) -> Result<SessionState> {
        self.load_state(&self.session_dir(t), t)
    }

    pub fn load_outcome(&self, t: usize) -> Result<SessionOutcome> {
        read_json(&self.session_dir(t).join("outcome.json"))
    }

    /// Run (or resume) session `t`. Session 0 ignores the stage flags.
    /// With memory tuning configured, a session only completes once its
    /// second stage has run; `run_stage1 = false` requires a stored stage-1
    /// checkpoint.
    pub fn run_session(&self, exp: &Experiment, t: usize, run_stage1: bool, run_stage2: bool) -> Result<SessionState> {
        if self.is_complete(t) {
            info!("session {t} already complete");
            return self.load_session(t);
        }
        if t == 0 {
            let (state, outcome) = exp.train_base()?;
            self.save_state(&self.session_dir(0), &state, &outcome)?;
            return Ok(state);
        }
        if !self.is_complete(t - 1) {
            return Err(Error::Lifecycle(format!("session {} has no complete checkpoint", t - 1)));
        }
        let stage1_dir = self.stage1_dir(t);
        let (mut state, mut outcome) = if stage1_dir.join(COMPLETE).exists() {
            (self.load_state(&stage1_dir, t)?, read_json(&stage1_dir.join("outcome.json"))?)
        } else if run_stage1 {
            let prev = self.load_session(t - 1)?;
            exp.check_state(&prev)?;
            let (s, o) = exp.stage1(&prev)?;
            self.save_state(&stage1_dir, &s, &o)?;
            (s, o)
        } else {
            return Err(Error::Lifecycle(format!("stage 1 of session {t} has not run")));
        };
        let cfg = exp.config();
        let wants_stage2 = cfg.run.stage2 && cfg.memory.enabled;
        if wants_stage2 {
            if !run_stage2 {
                info!("session {t}: stage 1 stored; memory tuning pending");
                return Ok(state);
            }
            let (summary, plan) = exp.stage2(&mut state, &cfg.selection)?;
            std::fs::write(self.root.join(format!("plan_{t}.tsv")), plan.to_tsv())?;
            outcome.stage2 = Some(summary);
        }
        self.save_state(&self.session_dir(t), &state, &outcome)?;
        Ok(state)
    }

    /// Evaluate every complete session under `protocol` and write
    /// `eval_<protocol>/results.csv` and `report.json`.
    pub fn evaluate(&self, exp: &Experiment, protocol: Protocol) -> Result<(ResultsMatrix, RunReport)> {
        let start = Instant::now();
        let sessions = self.completed_sessions();
        if sessions == 0 {
            return Err(Error::Lifecycle("no complete session to evaluate".into()));
        }
        let mut m = ResultsMatrix::new();
        for t in 0..sessions {
            let state = self.load_session(t)?;
            let (mrr, hit) = exp.evaluate_row(&state, protocol)?;
            m.push_row(mrr, hit)?;
        }
        let config = serde_json::to_value(exp.config()).map_err(|e| format_err("config", e))?;
        let report = RunReport::from_matrix(&m, exp.config().seed, start.elapsed().as_secs_f64(), config)?;
        let out = self.root.join(format!("eval_{}", protocol.as_str()));
        std::fs::create_dir_all(&out)?;
        emit_report(&out, &m, &report)?;
        Ok((m, report))
    }
}
