//! Disjoint document slices with per-slice train and test queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{slice_sizes, QueryRecord};
use crate::docid::{DocKey, DocumentRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualSplit {
    /// Document keys of each slice.
    pub slices: Vec<Vec<DocKey>>,
    /// Training queries whose relevant documents all lie in the slice.
    pub train: Vec<Vec<QueryRecord>>,
    /// Test queries whose relevant documents all lie in the slice.
    pub test: Vec<Vec<QueryRecord>>,
    /// Test queries discarded because their relevant documents span slices.
    pub discarded: Vec<u32>,
}

impl ContinualSplit {
    pub fn sessions(&self) -> usize {
        self.slices.len()
    }

    /// Slice index of every document.
    pub fn slice_of(&self) -> BTreeMap<DocKey, usize> {
        self.slices
            .iter()
            .enumerate()
            .flat_map(|(s, keys)| keys.iter().map(move |&k| (k, s)))
            .collect()
    }
}

/// Partition `docs` in order into `slices` slices (half, then equal parts)
/// and route each query to the slice holding all of its relevant documents.
/// Queries whose relevance spans slices are dropped.
pub fn split_corpus(docs: &[DocumentRecord], queries: &[QueryRecord], slices: usize) -> Result<ContinualSplit> {
    let sizes = slice_sizes(docs.len(), slices)?;
    let mut parts = Vec::with_capacity(slices);
    let mut start = 0;
    for size in sizes {
        parts.push(docs[start..start + size].iter().map(|d| d.key).collect::<Vec<_>>());
        start += size;
    }
    let mut split = ContinualSplit {
        slices: parts,
        train: vec![Vec::new(); slices],
        test: vec![Vec::new(); slices],
        discarded: Vec::new(),
    };
    let slice_of = split.slice_of();
    if slice_of.len() != docs.len() {
        return Err(Error::Config("duplicate document keys".into()));
    }
    for q in queries {
        let mut owners = q.relevant.iter().map(|k| {
            slice_of
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("query {} points at unknown document {k}", q.id)))
        });
        let first = match owners.next() {
            Some(s) => s?,
            None => return Err(Error::Config(format!("query {} has no relevant document", q.id))),
        };
        let mut single = true;
        for s in owners {
            single &= s? == first;
        }
        match (single, q.test) {
            (true, true) => split.test[first].push(q.clone()),
            (true, false) => split.train[first].push(q.clone()),
            (false, _) => split.discarded.push(q.id),
        }
    }
    Ok(split)
}
