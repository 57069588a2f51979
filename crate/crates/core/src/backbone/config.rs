use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Padding; also the decoder start symbol.
pub const PAD: Token = 0;
pub const EOS: Token = 1;
/// First id after the reserved symbols.
pub const FIRST_FREE_TOKEN: Token = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub max_query_len: usize,
    pub max_docid_len: usize,
}

impl BackboneConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            max_query_len: 16,
            max_docid_len: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size <= FIRST_FREE_TOKEN as usize {
            return Err(Error::Config("vocabulary has no room beyond PAD/EOS".into()));
        }
        if self.max_query_len == 0 || self.max_docid_len == 0 {
            return Err(Error::Config("zero max length".into()));
        }
        Ok(())
    }

    /// Plain `key = value` text.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "backbone config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// What a supervision pair was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Doc2Docid,
    PseudoQuery2Docid,
    Query2Docid,
}

/// One `(input tokens, target docid)` training example. The target always
/// ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionPair {
    pub query: Vec<Token>,
    pub target: Vec<Token>,
    pub kind: PairKind,
}

impl SupervisionPair {
    pub fn new(query: Vec<Token>, mut target: Vec<Token>, kind: PairKind) -> Self {
        if target.last() != Some(&EOS) {
            target.push(EOS);
        }
        Self {
            query,
            target,
            kind,
        }
    }
}
