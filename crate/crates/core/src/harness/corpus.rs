//! Synthetic clustered corpus with real and pseudo queries.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{CorpusConfig, VocabLayout};
use crate::backbone::Token;
use crate::docid::{DocKey, DocumentRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Real,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u32,
    /// Relevant documents; the generator emits exactly one.
    pub relevant: Vec<DocKey>,
    pub tokens: Vec<Token>,
    pub kind: QueryKind,
    /// Held out for evaluation.
    pub test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<DocumentRecord>,
    pub queries: Vec<QueryRecord>,
}

pub const MIN_SLICE_DOCS: usize = 20;

/// Word-id ranges carved out of the vocabulary.
struct Words {
    topic: Vec<Vec<Token>>,
    domain: Vec<Token>,
    sections: Vec<Vec<Token>>,
    shared: Vec<Token>,
}

impl Words {
    fn new(c: &CorpusConfig, layout: VocabLayout) -> Self {
        let mut next = layout.first_word;
        let mut take = |n: usize| {
            let v: Vec<Token> = (next..next + n as Token).collect();
            next += n as Token;
            v
        };
        let topic = (0..c.topics).map(|_| take(c.topic_vocab)).collect();
        let domain = take(c.topics);
        let sections = (0..c.topics).map(|_| take(c.sections_per_topic)).collect();
        let used: usize = c.topics * (c.topic_vocab + 1 + c.sections_per_topic);
        let shared = take(layout.vocab_size - layout.first_word as usize - used);
        Self {
            topic,
            domain,
            sections,
            shared,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Deterministic corpus for `seed`. Documents are emitted in slice order
/// (see `slice_sizes`).
pub fn make_synthetic_corpus(c: &CorpusConfig, layout: VocabLayout, seed: u64) -> Result<Corpus> {
    let sizes = slice_sizes(c.docs, c.slices)?;
    if sizes.iter().any(|&s| s < MIN_SLICE_DOCS) {
        return Err(Error::Config(format!(
            "{} documents give slices smaller than {MIN_SLICE_DOCS}",
            c.docs
        )));
    }
    let words = Words::new(c, layout);
    if words.shared.len() < c.content_len {
        return Err(Error::Config("shared word pool too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..c.topics)
        .map(|_| {
            let mut v = gaussian(&mut rng, c.embed_dim, 1.0);
            normalize(&mut v);
            v
        })
        .collect();
    let vocab = layout.vocab_size;
    let word_vecs: Vec<Vec<f64>> = (0..vocab)
        .map(|_| gaussian(&mut rng, c.embed_dim, 1.0 / (c.embed_dim as f64).sqrt()))
        .collect();

    let mut docs = Vec::with_capacity(c.docs);
    let mut queries = Vec::new();
    let mut slice = 0;
    let mut in_slice = 0;
    for key in 0..c.docs as DocKey {
        if in_slice == sizes[slice] {
            slice += 1;
            in_slice = 0;
        }
        in_slice += 1;
        let topic = rng.random_range(0..c.topics);
        let mut content: Vec<Token> = words.topic[topic]
            .choose_multiple(&mut rng, c.topic_tokens)
            .copied()
            .collect();
        content.extend(
            words
                .shared
                .choose_multiple(&mut rng, c.content_len - c.topic_tokens)
                .copied(),
        );
        content.shuffle(&mut rng);

        let mut emb = centers[topic].clone();
        let scale = c.content_weight / (content.len() as f64).sqrt();
        for &t in &content {
            for (e, w) in emb.iter_mut().zip(&word_vecs[t as usize]) {
                *e += scale * w;
            }
        }
        for (e, n) in emb.iter_mut().zip(gaussian(&mut rng, c.embed_dim, c.embed_noise)) {
            *e += n;
        }
        normalize(&mut emb);

        let title: Vec<Token> = content.choose_multiple(&mut rng, c.title_len).copied().collect();
        let section = *words.sections[topic].choose(&mut rng).expect("sections");
        let slug = *content.choose(&mut rng).expect("content");
        docs.push(DocumentRecord {
            key,
            embedding: emb,
            title,
            url_path: vec![section, slug],
            domain: words.domain[topic],
            content: content.clone(),
            topic,
            slice,
        });

        let test_index = c.real_queries - 1;
        for r in 0..c.real_queries {
            let len = rng.random_range(c.query_min_len..=c.query_max_len);
            let tokens: Vec<Token> = content.choose_multiple(&mut rng, len).copied().collect();
            queries.push(QueryRecord {
                id: queries.len() as u32,
                relevant: vec![key],
                tokens,
                kind: QueryKind::Real,
                test: r == test_index,
            });
        }
        for _ in 0..c.pseudo_queries {
            let len = rng.random_range(c.query_min_len..=c.query_max_len);
            let tokens: Vec<Token> = content
                .choose_multiple(&mut rng, len)
                .map(|&t| {
                    if rng.random::<f64>() < c.pseudo_noise {
                        *words.shared.choose(&mut rng).expect("shared words")
                    } else {
                        t
                    }
                })
                .collect();
            queries.push(QueryRecord {
                id: queries.len() as u32,
                relevant: vec![key],
                tokens,
                kind: QueryKind::Pseudo,
                test: false,
            });
        }
    }
    Ok(Corpus { docs, queries })
}

/// Half the documents in the first slice, the rest split evenly (any
/// remainder goes to the earliest later slices).
pub fn slice_sizes(docs: usize, slices: usize) -> Result<Vec<usize>> {
    if slices < 2 {
        return Err(Error::Config("need at least two slices".into()));
    }
    let first = docs / 2;
    let rest = docs - first;
    let each = rest / (slices - 1);
    let extra = rest % (slices - 1);
    let mut sizes = vec![first];
    sizes.extend((0..slices - 1).map(|i| each + usize::from(i < extra)));
    if sizes.contains(&0) {
        return Err(Error::Config(format!("{docs} documents leave an empty slice")));
    }
    Ok(sizes)
}
