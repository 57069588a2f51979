//! Document identifiers: product-quantized semantic codes (SPQ) and
//! title+URL keyword identifiers (TU), plus collision accounting.

mod pq;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use pq::{kmeans, nearest, KMeansFit, PQCodebook, KMEANS_MAX_ITERS};

use crate::backbone::{Token, EOS, PAD};
use crate::error::{contract, Error, Result};

pub type DocKey = u32;

/// Maximum number of title tokens kept in a TU identifier.
pub const TU_TITLE_MAX: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocidScheme {
    Spq,
    Tu,
}

impl DocidScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            DocidScheme::Spq => "spq",
            DocidScheme::Tu => "tu",
        }
    }
}

impl FromStr for DocidScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spq" => Ok(DocidScheme::Spq),
            "tu" => Ok(DocidScheme::Tu),
            other => Err(Error::Config(format!("unknown docid scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Docid {
    pub tokens: Vec<Token>,
    pub scheme: DocidScheme,
}

impl Docid {
    pub fn spq(codebook: &PQCodebook, embedding: &[f64]) -> Result<Self> {
        Ok(Self {
            tokens: codebook.encode(embedding)?,
            scheme: DocidScheme::Spq,
        })
    }

    /// The sequence the decoder produces: SPQ codes get an EOS appended, TU
    /// identifiers already end with one.
    pub fn decode_sequence(&self) -> Vec<Token> {
        let mut seq = self.tokens.clone();
        if seq.last() != Some(&EOS) {
            seq.push(EOS);
        }
        seq
    }
}

/// TU identifier: title (first 20 tokens) ++ reversed URL path segments ++
/// second-level domain, PAD dropped, truncated to `cap`, EOS appended.
pub fn tu_encode(title: &[Token], url_path: &[Token], domain: Token, cap: usize) -> Result<Docid> {
    let title: Vec<Token> = title.iter().copied().filter(|&t| t != PAD).collect();
    if title.is_empty() {
        return Err(contract("TU identifier needs a nonempty title"));
    }
    let mut tokens: Vec<Token> = title.into_iter().take(TU_TITLE_MAX).collect();
    tokens.extend(url_path.iter().rev().copied().filter(|&t| t != PAD));
    if domain != PAD {
        tokens.push(domain);
    }
    tokens.retain(|&t| t != EOS);
    tokens.truncate(cap);
    tokens.push(EOS);
    Ok(Docid {
        tokens,
        scheme: DocidScheme::Tu,
    })
}

/// Synthetic document metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub key: DocKey,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    pub title: Vec<Token>,
    pub url_path: Vec<Token>,
    pub domain: Token,
    /// Content tokens the queries are drawn from.
    pub content: Vec<Token>,
    pub topic: usize,
    pub slice: usize,
}

/// Fraction of documents whose identifier is shared with at least one other
/// document.
pub fn collision_rate<T: AsRef<[Token]>>(docids: &[T]) -> Result<f64> {
    if docids.is_empty() {
        return Err(contract("collision rate of an empty list"));
    }
    let mut counts: HashMap<&[Token], usize> = HashMap::new();
    for d in docids {
        *counts.entry(d.as_ref()).or_default() += 1;
    }
    let shared: usize = counts.values().filter(|&&c| c > 1).sum();
    Ok(shared as f64 / docids.len() as f64)
}

/// Docid map as text: `dockey TAB scheme TAB space-separated token ids`.
pub fn export_docid_map(entries: &[(DocKey, Docid)]) -> String {
    let mut out = String::new();
    for (key, d) in entries {
        let toks: Vec<String> = d.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{key}\t{}\t{}", d.scheme.as_str(), toks.join(" "));
    }
    out
}

pub fn parse_docid_map(text: &str) -> Result<Vec<(DocKey, Docid)>> {
    let bad = |line: &str| Error::Format {
        what: "docid map",
        detail: format!("line `{line}`"),
    };
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut f = line.split('\t');
            let (Some(key), Some(scheme), Some(toks), None) = (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(bad(line));
            };
            let key = key.parse().map_err(|_| bad(line))?;
            let scheme = scheme.parse()?;
            let tokens = toks
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(line)))
                .collect::<Result<_>>()?;
            Ok((key, Docid { tokens, scheme }))
        })
        .collect()
}
