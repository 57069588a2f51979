//! Prefix trie over docid sequences and constrained beam search.
//!
//! Per-step probabilities are a softmax over the trie-valid tokens only,
//! which is the same distribution as a full-vocabulary softmax with invalid
//! tokens at negative infinity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::backbone::{DecodeContext, GenIRModel, Token};
use crate::docid::DocKey;
use crate::error::{contract, Error, Result};
use crate::numerics::log_sum_exp;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<Token, usize>,
    terminal: BTreeSet<DocKey>,
}

#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    sequences: usize,
}

impl Default for PrefixTrie {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixTrie {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node::default()],
            sequences: 0,
        }
    }

    pub fn from_docids<'a>(docids: impl IntoIterator<Item = (&'a [Token], DocKey)>) -> Result<Self> {
        let mut t = Self::new();
        for (seq, key) in docids {
            t.insert(seq, key)?;
        }
        Ok(t)
    }

    /// Insert a docid; identical sequences share one terminal key set.
    pub fn insert(&mut self, docid: &[Token], key: DocKey) -> Result<()> {
        if docid.is_empty() {
            return Err(contract("cannot insert an empty docid"));
        }
        let mut node = 0;
        for &tok in docid {
            node = match self.nodes[node].children.get(&tok) {
                Some(&child) => child,
                None => {
                    self.nodes.push(Node::default());
                    let child = self.nodes.len() - 1;
                    self.nodes[node].children.insert(tok, child);
                    child
                }
            };
        }
        if self.nodes[node].terminal.is_empty() {
            self.sequences += 1;
        }
        self.nodes[node].terminal.insert(key);
        Ok(())
    }

    fn node_at(&self, prefix: &[Token]) -> Option<usize> {
        let mut node = 0;
        for tok in prefix {
            node = *self.nodes[node].children.get(tok)?;
        }
        Some(node)
    }

    /// Tokens that may follow `prefix`, ascending. Empty for invalid prefixes.
    pub fn valid_next(&self, prefix: &[Token]) -> Vec<Token> {
        self.node_at(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Document keys stored at the terminal reached by `seq`.
    pub fn terminal_keys(&self, seq: &[Token]) -> Option<&BTreeSet<DocKey>> {
        self.node_at(seq)
            .map(|n| &self.nodes[n].terminal)
            .filter(|t| !t.is_empty())
    }

    pub fn contains(&self, seq: &[Token]) -> bool {
        self.terminal_keys(seq).is_some()
    }

    /// Number of distinct docid sequences.
    pub fn len(&self) -> usize {
        self.sequences
    }

    pub fn is_empty(&self) -> bool {
        self.sequences == 0
    }

    /// All `(sequence, keys)` pairs in lexicographic order.
    pub fn entries(&self) -> Vec<(Vec<Token>, Vec<DocKey>)> {
        let mut out = Vec::with_capacity(self.sequences);
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            let n = &self.nodes[node];
            if !n.terminal.is_empty() {
                out.push((prefix.clone(), n.terminal.iter().copied().collect()));
            }
            for (&tok, &child) in n.children.iter().rev() {
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((child, p));
            }
        }
        out
    }

    /// Sorted docid list, one `key TAB tokens` line per document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (seq, keys) in self.entries() {
            let toks: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
            for k in keys {
                out.push_str(&format!("{k}\t{}\n", toks.join(" ")));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format {
            what: "trie",
            detail: format!("line `{line}`"),
        };
        let mut t = Self::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (key, toks) = line.split_once('\t').ok_or_else(|| bad(line))?;
            let key: DocKey = key.parse().map_err(|_| bad(line))?;
            let seq: Vec<Token> = toks
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(line)))
                .collect::<Result<_>>()?;
            t.insert(&seq, key)?;
        }
        Ok(t)
    }
}

/// Model interface needed by constrained decoding.
pub trait DecoderModel {
    type Context;
    fn prepare(&self, query: &[Token]) -> Result<Self::Context>;
    /// Final hidden state after each prefix.
    fn hidden(&self, ctx: &Self::Context, prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>>;
    /// Unbiased logits of the given tokens.
    fn logits(&self, hidden: &[f64], tokens: &[Token]) -> Vec<f64>;
}

impl DecoderModel for GenIRModel {
    type Context = DecodeContext;

    fn prepare(&self, query: &[Token]) -> Result<DecodeContext> {
        GenIRModel::prepare(self, query)
    }

    fn hidden(&self, ctx: &DecodeContext, prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        let h = self.hidden_for_prefixes(ctx, prefixes)?;
        Ok((0..h.rows()).map(|r| h.row(r).to_vec()).collect())
    }

    fn logits(&self, hidden: &[f64], tokens: &[Token]) -> Vec<f64> {
        self.token_logits(hidden, Some(tokens))
    }
}

/// Additive per-token scores for the trie-valid tokens of one step.
pub trait ScoreHook {
    /// Returns one finite score per entry of `valid`, in the same order.
    fn bias(&mut self, step: usize, prefix: &[Token], hidden: &[f64], valid: &[Token]) -> Result<Vec<f64>>;
}

/// Hook that adds nothing.
pub struct NoBias;

impl ScoreHook for NoBias {
    fn bias(&mut self, _: usize, _: &[Token], _: &[f64], valid: &[Token]) -> Result<Vec<f64>> {
        Ok(vec![0.0; valid.len()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
    pub finished: bool,
}

/// One decoded identifier with all documents sharing it.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedDocid {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
    pub keys: Vec<DocKey>,
}

fn better(a: &(Vec<Token>, f64), b: &(Vec<Token>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Log-softmax over the valid set of biased logits.
fn step_log_probs(
    model: &impl DecoderModel,
    hook: &mut Option<&mut dyn ScoreHook>,
    step: usize,
    prefix: &[Token],
    hidden: &[f64],
    valid: &[Token],
) -> Result<Vec<f64>> {
    let mut scores = model.logits(hidden, valid);
    if let Some(h) = hook.as_deref_mut() {
        let bias = h.bias(step, prefix, hidden, valid)?;
        if bias.len() != valid.len() {
            return Err(contract(format!(
                "score hook returned {} scores for {} valid tokens",
                bias.len(),
                valid.len()
            )));
        }
        for (s, b) in scores.iter_mut().zip(&bias) {
            if !b.is_finite() {
                return Err(contract("score hook returned a non-finite score"));
            }
            *s += b;
        }
    }
    let lse = log_sum_exp(&scores);
    Ok(scores.into_iter().map(|s| s - lse).collect())
}

/// Beam search restricted to trie paths. Returns at most `beam` finished
/// identifiers ranked by cumulative log-probability (ties: lexicographically
/// smaller sequence first).
pub fn constrained_beam_search<M: DecoderModel>(
    model: &M,
    query: &[Token],
    trie: &PrefixTrie,
    beam: usize,
    mut hook: Option<&mut dyn ScoreHook>,
    max_len: usize,
) -> Result<Vec<RankedDocid>> {
    if beam == 0 {
        return Err(contract("beam size must be >= 1"));
    }
    let ctx = model.prepare(query)?;
    let mut alive: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<Token>, f64)> = Vec::new();
    if trie.contains(&[]) {
        finished.push((Vec::new(), 0.0));
    }
    for step in 0..max_len {
        if alive.is_empty() {
            break;
        }
        if finished.len() >= beam {
            finished.sort_by(better);
            let worst_kept = finished[beam - 1].1;
            if alive.iter().all(|(_, s)| *s <= worst_kept) {
                break;
            }
        }
        let prefixes: Vec<Vec<Token>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let hidden = model.hidden(&ctx, &prefixes)?;
        let mut candidates = Vec::new();
        for ((prefix, score), h) in alive.iter().zip(&hidden) {
            let valid = trie.valid_next(prefix);
            if valid.is_empty() {
                continue;
            }
            let lp = step_log_probs(model, &mut hook, step, prefix, h, &valid)?;
            for (&tok, l) in valid.iter().zip(lp) {
                let mut seq = prefix.clone();
                seq.push(tok);
                candidates.push((seq, score + l));
            }
        }
        candidates.sort_by(better);
        candidates.truncate(beam);
        alive = Vec::with_capacity(candidates.len());
        for cand in candidates {
            if trie.contains(&cand.0) {
                finished.push(cand.clone());
            }
            if !trie.valid_next(&cand.0).is_empty() {
                alive.push(cand);
            }
        }
    }
    finished.sort_by(better);
    finished.truncate(beam);
    if finished.is_empty() {
        warn!("constrained decoding reached no terminal for query {query:?}");
    }
    Ok(finished
        .into_iter()
        .map(|(tokens, log_prob)| {
            let keys = trie
                .terminal_keys(&tokens)
                .map(|k| k.iter().copied().collect())
                .unwrap_or_default();
            RankedDocid {
                tokens,
                log_prob,
                keys,
            }
        })
        .collect())
}

/// Teacher-forced log-probability of a full trie path under the same
/// constrained, biased step distribution used by beam search.
pub fn sequence_log_prob<M: DecoderModel>(
    model: &M,
    query: &[Token],
    trie: &PrefixTrie,
    seq: &[Token],
    mut hook: Option<&mut dyn ScoreHook>,
) -> Result<f64> {
    if !trie.contains(seq) {
        return Err(contract("sequence is not a docid in the trie"));
    }
    let ctx = model.prepare(query)?;
    let prefixes: Vec<Vec<Token>> = (0..seq.len()).map(|k| seq[..k].to_vec()).collect();
    let hidden = model.hidden(&ctx, &prefixes)?;
    let mut total = 0.0;
    for (k, h) in hidden.iter().enumerate() {
        let valid = trie.valid_next(&seq[..k]);
        let lp = step_log_probs(model, &mut hook, k, &seq[..k], h, &valid)?;
        let pos = valid
            .binary_search(&seq[k])
            .expect("trie path tokens are valid");
        total += lp[pos];
    }
    Ok(total)
}
