//! Product-quantization codebooks fitted with k-means.

use log::debug;
use rand::Rng;

use crate::backbone::{Token, FIRST_FREE_TOKEN};
use crate::error::{contract, Error, Result};
use crate::numerics::{ParameterSet, Tensor};

pub const KMEANS_MAX_ITERS: usize = 25;
const CENTROIDS: &str = "pq.centroids";
const TAG_PREFIX: &str = "pq.fit_tag:";

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (squared Euclidean), lower index on ties.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Result of one k-means fit.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Number of times an empty cluster was re-seeded.
    pub reseeds: usize,
}

/// Lloyd's algorithm with k-means++ seeding. Stops early once assignments
/// no longer change. Empty clusters are re-seeded from the point farthest
/// from its assigned centroid.
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(contract(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(contract("k-means points have mixed dimensions"));
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            0
        };
        let c = points[pick].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let mut assign = vec![usize::MAX; points.len()];
    let mut reseeds = 0;
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = nearest(p, &centroids);
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut used_for_reseed = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = None;
                let mut far_d = f64::NEG_INFINITY;
                for (i, p) in points.iter().enumerate() {
                    if used_for_reseed[i] {
                        continue;
                    }
                    let d = sq_dist(p, &centroids[assign[i]]);
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
                let i = far.expect("at least k points");
                used_for_reseed[i] = true;
                centroids[c] = points[i].to_vec();
                reseeds += 1;
                debug!("k-means: re-seeded empty cluster {c} from point {i}");
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        iterations,
        reseeds,
    })
}

/// `M` sub-space codebooks of `K` centroids each.
#[derive(Clone, Debug, PartialEq)]
pub struct PQCodebook {
    subspaces: usize,
    centroids_per_space: usize,
    sub_dim: usize,
    /// `[m][k]` -> centroid of length `sub_dim`
    centroids: Vec<Vec<Vec<f64>>>,
    fit_tag: String,
}

impl PQCodebook {
    /// Fit on the embeddings of the initial slice. Frozen afterwards.
    pub fn fit(
        embeddings: &[&[f64]],
        subspaces: usize,
        centroids_per_space: usize,
        fit_tag: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(contract("no embeddings to fit"));
        }
        let dim = embeddings[0].len();
        if subspaces == 0 || !dim.is_multiple_of(subspaces) {
            return Err(contract(format!(
                "embedding dim {dim} not divisible by {subspaces} sub-spaces"
            )));
        }
        if fit_tag.contains(['\t', '\n']) {
            return Err(contract("fit tag must not contain tabs or newlines"));
        }
        let sub_dim = dim / subspaces;
        let mut centroids = Vec::with_capacity(subspaces);
        for m in 0..subspaces {
            let subs: Vec<&[f64]> = embeddings
                .iter()
                .map(|e| &e[m * sub_dim..(m + 1) * sub_dim])
                .collect();
            let fit = kmeans(&subs, centroids_per_space, rng)?;
            if fit.reseeds > 0 {
                log::info!("sub-space {m}: {} empty-cluster re-seeds", fit.reseeds);
            }
            centroids.push(fit.centroids);
        }
        Ok(Self {
            subspaces,
            centroids_per_space,
            sub_dim,
            centroids,
            fit_tag: fit_tag.to_string(),
        })
    }

    pub fn subspaces(&self) -> usize {
        self.subspaces
    }

    pub fn centroids_per_space(&self) -> usize {
        self.centroids_per_space
    }

    pub fn dim(&self) -> usize {
        self.subspaces * self.sub_dim
    }

    pub fn fit_tag(&self) -> &str {
        &self.fit_tag
    }

    pub fn centroid(&self, space: usize, k: usize) -> &[f64] {
        &self.centroids[space][k]
    }

    /// Number of docid tokens this codebook needs (`M * K`).
    pub fn token_count(&self) -> usize {
        self.subspaces * self.centroids_per_space
    }

    /// Vocabulary token for centroid `k` of sub-space `space`.
    pub fn token(&self, space: usize, k: usize) -> Token {
        FIRST_FREE_TOKEN + (space * self.centroids_per_space + k) as Token
    }

    /// Nearest-centroid code per sub-space.
    pub fn codes(&self, embedding: &[f64]) -> Result<Vec<usize>> {
        if embedding.len() != self.dim() {
            return Err(contract(format!(
                "embedding dim {} does not match codebook dim {}",
                embedding.len(),
                self.dim()
            )));
        }
        Ok((0..self.subspaces)
            .map(|m| {
                nearest(
                    &embedding[m * self.sub_dim..(m + 1) * self.sub_dim],
                    &self.centroids[m],
                )
            })
            .collect())
    }

    /// SPQ token sequence (length `M`, no EOS).
    pub fn encode(&self, embedding: &[f64]) -> Result<Vec<Token>> {
        Ok(self
            .codes(embedding)?
            .into_iter()
            .enumerate()
            .map(|(m, k)| self.token(m, k))
            .collect())
    }

    pub fn to_params(&self) -> ParameterSet {
        let mut data = Vec::with_capacity(self.token_count() * self.sub_dim);
        for space in &self.centroids {
            for c in space {
                data.extend_from_slice(c);
            }
        }
        let mut ps = ParameterSet::new();
        ps.insert(
            CENTROIDS,
            Tensor::new(
                vec![self.subspaces, self.centroids_per_space, self.sub_dim],
                data,
            )
            .expect("consistent codebook shape"),
        );
        ps.insert(format!("{TAG_PREFIX}{}", self.fit_tag), Tensor::zeros(&[0]));
        ps
    }

    pub fn from_params(ps: &ParameterSet) -> Result<Self> {
        let t = ps.value(CENTROIDS)?;
        let &[subspaces, k, sub_dim] = t.shape() else {
            return Err(Error::Format {
                what: "codebook",
                detail: format!("centroid tensor shape {:?}", t.shape()),
            });
        };
        let fit_tag = ps
            .names()
            .find_map(|n| n.strip_prefix(TAG_PREFIX))
            .unwrap_or_default()
            .to_string();
        let centroids = (0..subspaces)
            .map(|m| {
                (0..k)
                    .map(|j| {
                        let off = (m * k + j) * sub_dim;
                        t.data()[off..off + sub_dim].to_vec()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            subspaces,
            centroids_per_space: k,
            sub_dim,
            centroids,
            fit_tag,
        })
    }
}
