//! Continual generative retrieval with a parametric memory head.
//!
//! A small encoder-decoder maps queries to document-identifier token
//! sequences under prefix-trie constrained beam search. A product-key memory
//! attached to the decoder adds hidden-space corrections whose effect on the
//! scores of trie-valid tokens goes through the tied output embedding. After
//! each backbone adaptation session, a memory-only tuning stage updates a
//! budgeted set of value rows chosen from decoding-time access statistics.

pub mod backbone;
pub mod docid;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pamt;
pub mod pmh;
pub mod trie;

pub use error::{Error, Result};
