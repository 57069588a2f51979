//! Declarative experiment configuration. Every field must be present in the
//! file; nothing is filled in at run time.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TrainConfig};
use crate::docid::DocidScheme;
use crate::error::{Error, Result};
use crate::pamt::SelectionConfig;
use crate::pmh::PmhConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    FullFt,
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Decode over identifiers of slices `0..=t`.
    Expanded,
    /// Decode over all identifiers at every session.
    Fixed,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Expanded => "expanded",
            Protocol::Fixed => "fixed",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expanded" => Ok(Protocol::Expanded),
            "fixed" => Ok(Protocol::Fixed),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub docs: usize,
    pub slices: usize,
    pub topics: usize,
    pub embed_dim: usize,
    /// Content tokens per document.
    pub content_len: usize,
    /// Of which drawn from the document's topic vocabulary.
    pub topic_tokens: usize,
    /// Words per topic vocabulary.
    pub topic_vocab: usize,
    pub title_len: usize,
    /// Path sections per topic (first URL segment).
    pub sections_per_topic: usize,
    pub real_queries: usize,
    pub pseudo_queries: usize,
    pub query_min_len: usize,
    pub query_max_len: usize,
    /// Probability of replacing each pseudo-query token by a random word.
    pub pseudo_noise: f64,
    /// Weight of the content-token component of each embedding.
    pub content_weight: f64,
    /// Standard deviation of per-document embedding noise.
    pub embed_noise: f64,
    /// Fraction of training queries held out for validation logging.
    pub validation_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocidConfig {
    pub scheme: DocidScheme,
    pub subspaces: usize,
    pub centroids: usize,
    pub tu_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub enabled: bool,
    pub heads: usize,
    pub key_dim: usize,
    pub top_k: usize,
    /// Rows backed by documents; the table is padded up to a square.
    pub capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub mode: Adaptation,
    pub train: TrainConfig,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub stage2: bool,
    pub beam: usize,
    pub cutoff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub docid: DocidConfig,
    pub backbone: BackboneConfig,
    pub memory: MemoryConfig,
    pub base_training: TrainConfig,
    pub adaptation: AdaptationConfig,
    pub selection: SelectionConfig,
    pub run: RunConfig,
}

/// Token-id layout of the shared vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    /// First id after the docid-code block.
    pub first_word: u32,
    pub vocab_size: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 1200 documents in 6 slices, SPQ identifiers,
    /// full fine-tuning, expanded protocol, memory tuning on.
    pub fn desk(seed: u64) -> Self {
        let vocab = 512;
        Self {
            seed,
            corpus: CorpusConfig {
                docs: 1200,
                slices: 6,
                topics: 16,
                embed_dim: 32,
                content_len: 12,
                topic_tokens: 6,
                topic_vocab: 16,
                title_len: 3,
                sections_per_topic: 4,
                real_queries: 3,
                pseudo_queries: 5,
                query_min_len: 4,
                query_max_len: 6,
                pseudo_noise: 0.1,
                content_weight: 1.5,
                embed_noise: 0.1,
                validation_frac: 0.1,
            },
            docid: DocidConfig {
                scheme: DocidScheme::Spq,
                subspaces: 4,
                centroids: 16,
                tu_cap: 24,
            },
            backbone: BackboneConfig::desk_default(vocab),
            memory: MemoryConfig {
                enabled: true,
                heads: 4,
                key_dim: 32,
                top_k: 8,
                capacity: 4000,
            },
            base_training: TrainConfig {
                batch_size: 64,
                ..TrainConfig::adamw(60, 1e-3, 0)
            },
            adaptation: AdaptationConfig {
                mode: Adaptation::FullFt,
                train: TrainConfig {
                    batch_size: 64,
                    ..TrainConfig::adamw(3, 5e-4, 0)
                },
                rank: 8,
                alpha: 16.0,
            },
            selection: SelectionConfig {
                protected_frac: 0.1,
                budget: 256,
                margin: 0.01,
                negatives: 8,
                lr: 1e-3,
                epochs: 2,
                warmup_frac: 0.1,
                batch_size: 16,
                access_beam: 1,
            },
            run: RunConfig {
                protocol: Protocol::Expanded,
                stage2: true,
                beam: 10,
                cutoff: 10,
            },
        }
    }

    pub fn vocab(&self) -> VocabLayout {
        let codes = self.docid.subspaces * self.docid.centroids;
        VocabLayout {
            first_word: crate::backbone::FIRST_FREE_TOKEN + codes as u32,
            vocab_size: self.backbone.vocab_size,
        }
    }

    pub fn pmh_config(&self) -> PmhConfig {
        PmhConfig::for_capacity(
            self.memory.heads,
            self.memory.key_dim,
            self.memory.top_k,
            self.backbone.d_model,
            self.memory.capacity,
        )
    }

    /// Longest docid decode (identifier tokens plus EOS).
    pub fn max_decode_len(&self) -> usize {
        match self.docid.scheme {
            DocidScheme::Spq => self.docid.subspaces + 1,
            DocidScheme::Tu => self.docid.tu_cap + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        self.selection.validate()?;
        if super::corpus::slice_sizes(c.docs, c.slices)?
            .iter()
            .any(|&s| s < super::corpus::MIN_SLICE_DOCS)
        {
            return bad(format!(
                "{} documents give slices smaller than {}",
                c.docs,
                super::corpus::MIN_SLICE_DOCS
            ));
        }
        if c.topic_tokens > c.content_len || c.topic_tokens > c.topic_vocab {
            return bad("topic tokens exceed content length or topic vocabulary".into());
        }
        if c.query_min_len == 0 || c.query_min_len > c.query_max_len || c.query_max_len > c.content_len {
            return bad("query length range must lie within 1..=content_len".into());
        }
        if c.title_len == 0 || c.title_len > c.content_len {
            return bad("title length must lie within 1..=content_len".into());
        }
        if c.content_len > self.backbone.max_query_len {
            return bad("document content does not fit the encoder".into());
        }
        if c.real_queries < 2 {
            return bad("need at least two real queries per document (train + test)".into());
        }
        if !(0.0..1.0).contains(&c.validation_frac) || !(0.0..=1.0).contains(&c.pseudo_noise) {
            return bad("fractions must lie in [0, 1)".into());
        }
        if !c.embed_dim.is_multiple_of(self.docid.subspaces) {
            return bad("embedding dim not divisible by PQ sub-spaces".into());
        }
        if self.max_decode_len() > self.backbone.max_docid_len + 1 {
            return bad("docids longer than the decoder allows".into());
        }
        let words = self.vocab().words_needed(c);
        if self.vocab().first_word as usize + words > self.backbone.vocab_size {
            return bad(format!(
                "vocabulary of {} too small: needs {} word tokens after id {}",
                self.backbone.vocab_size,
                words,
                self.vocab().first_word
            ));
        }
        if self.run.beam == 0 || self.run.cutoff == 0 {
            return bad("beam and cutoff must be >= 1".into());
        }
        if self.memory.enabled {
            self.pmh_config().validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

impl VocabLayout {
    /// Word tokens: per-topic vocabularies, per-topic domains and sections,
    /// then a shared pool using whatever remains.
    pub fn words_needed(&self, c: &CorpusConfig) -> usize {
        c.topics * (c.topic_vocab + 1 + c.sections_per_topic) + 16
    }
}
