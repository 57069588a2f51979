//! Small models, tries, memory heads and configurations for tests.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use pamt::backbone::{BackboneConfig, GenIRModel, Token, EOS};
use pamt::docid::DocKey;
use pamt::harness::ExperimentConfig;
use pamt::numerics::{ParameterSet, Tensor};
use pamt::pmh::{MemoryHead, PmhConfig, FPHI, KEYS1, KEYS2, VALUES};
use pamt::trie::{DecoderModel, PrefixTrie, ScoreHook};
use pamt::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rand_tensor, rng};

/// Decoder whose hidden state is a hash of the prefix. Deterministic, cheap,
/// and unrelated to any trained model.
pub struct ToyDecoder {
    pub seed: u64,
}

const TOY_DIM: usize = 8;

impl DecoderModel for ToyDecoder {
    type Context = u64;

    fn prepare(&self, query: &[Token]) -> Result<u64> {
        let mut h = DefaultHasher::new();
        (self.seed, query).hash(&mut h);
        Ok(h.finish())
    }

    fn hidden(&self, ctx: &u64, prefixes: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = DefaultHasher::new();
                (ctx, p).hash(&mut h);
                let mut r = rng(h.finish());
                (0..TOY_DIM).map(|_| r.random_range(-2.0..2.0)).collect()
            })
            .collect())
    }

    fn logits(&self, hidden: &[f64], tokens: &[Token]) -> Vec<f64> {
        tokens
            .iter()
            .map(|&t| hidden[t as usize % TOY_DIM] + 0.01 * t as f64)
            .collect()
    }
}

/// Random finite scores in `[-scale, scale]`.
pub struct RandomHook {
    pub rng: ChaCha8Rng,
    pub scale: f64,
}

impl ScoreHook for RandomHook {
    fn bias(&mut self, _: usize, _: &[Token], _: &[f64], valid: &[Token]) -> Result<Vec<f64>> {
        Ok(valid
            .iter()
            .map(|_| self.rng.random_range(-self.scale..=self.scale))
            .collect())
    }
}

/// `count` random sequences over tokens `2..2 + alphabet` of length
/// `1..=max_len`, with their keys. Duplicates and prefixes of other
/// sequences are allowed.
pub fn random_docids(r: &mut impl Rng, count: usize, alphabet: u32, max_len: usize) -> Vec<(Vec<Token>, DocKey)> {
    (0..count)
        .map(|k| {
            let len = r.random_range(1..=max_len);
            let seq = (0..len).map(|_| 2 + r.random_range(0..alphabet)).collect();
            (seq, k as DocKey)
        })
        .collect()
}

/// Fixed-length identifiers ending in EOS, as produced by the quantized
/// scheme.
pub fn random_spq_docids(r: &mut impl Rng, count: usize, codes: u32, len: usize) -> Vec<(Vec<Token>, DocKey)> {
    (0..count)
        .map(|k| {
            let mut seq: Vec<Token> = (0..len).map(|_| 2 + r.random_range(0..codes)).collect();
            seq.push(EOS);
            (seq, k as DocKey)
        })
        .collect()
}

pub fn trie_of(docids: &[(Vec<Token>, DocKey)]) -> PrefixTrie {
    PrefixTrie::from_docids(docids.iter().map(|(s, k)| (s.as_slice(), *k))).unwrap()
}

/// Memory head with every parameter drawn at random, values included.
pub fn random_head(r: &mut impl Rng, config: PmhConfig) -> MemoryHead {
    let half = config.key_dim / 2;
    let mut ps = ParameterSet::new();
    ps.insert(FPHI, rand_tensor(r, config.hidden, config.heads * config.key_dim));
    ps.insert(KEYS1, rand_tensor(r, config.sub_keys, half));
    ps.insert(KEYS2, rand_tensor(r, config.sub_keys, half));
    ps.insert(VALUES, rand_tensor(r, config.rows(), config.hidden));
    MemoryHead::from_parts(config, ps).unwrap()
}

pub fn small_backbone(vocab_size: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size,
        d_model: 16,
        d_ff: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        max_query_len: 8,
        max_docid_len: 6,
    }
}

pub fn small_model(seed: u64, vocab_size: usize) -> GenIRModel {
    GenIRModel::new(small_backbone(vocab_size), &mut rng(seed)).unwrap()
}

/// A full pipeline configuration small enough to run six sessions in a few
/// seconds.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(seed);
    c.corpus.docs = 200;
    c.corpus.topics = 4;
    c.corpus.real_queries = 2;
    c.corpus.pseudo_queries = 1;
    c.backbone.d_model = 16;
    c.backbone.d_ff = 32;
    c.backbone.encoder_layers = 1;
    c.backbone.decoder_layers = 1;
    c.backbone.heads = 2;
    c.memory.heads = 2;
    c.memory.key_dim = 8;
    c.memory.top_k = 4;
    c.memory.capacity = 200;
    c.base_training.epochs = 3;
    c.adaptation.train.epochs = 1;
    c.selection.budget = 16;
    c.selection.epochs = 1;
    c.run.beam = 4;
    c.validate().unwrap();
    c
}

/// `hidden @ f_phi` for one head, split into halves.
pub fn head_queries(head: &MemoryHead, hidden: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = head.config();
    let f: &Tensor = head.params().value(FPHI).unwrap();
    let col = |c: usize| (0..hidden.len()).map(|r| hidden[r] * f.row(r)[c]).sum::<f64>();
    let half = cfg.key_dim / 2;
    let start = h * cfg.key_dim;
    (
        (start..start + half).map(col).collect(),
        (start + half..start + cfg.key_dim).map(col).collect(),
    )
}
