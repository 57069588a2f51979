//! Toy encoder-decoder GenIR model with tied output embeddings.

mod config;
mod model;
mod train;

pub use config::{BackboneConfig, PairKind, SupervisionPair, Token, EOS, FIRST_FREE_TOKEN, PAD};
pub use model::{
    positional_encoding, DecodeContext, EncoderOutput, GenIRModel, LowRankAdapter, ADAPTER_PREFIX,
    EMBED,
};
pub use train::{
    batch_nll, mean_nll, teacher_forced_logprobs, train_nll, HiddenCorrection, TrainConfig,
    TrainLog,
};

#[cfg(test)]
mod tests;
