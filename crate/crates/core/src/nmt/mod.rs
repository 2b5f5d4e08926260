//! Corpus ingestion, vocabulary, and the two target NMT models (RNN-search
//! and a mini transformer) with teacher-forcing probabilities, training,
//! greedy decoding, and checkpointing.

mod corpus;
mod decode;
mod model;
mod train;
pub mod vocab;

pub use corpus::{load_parallel, read_token_lines, Context, PrefixSource, SentencePair};
pub use decode::{greedy_decode, DecodeOutput};
pub use model::{
    argmax, Forward, ForwardOutput, ModelConfig, ModelKind, NmtModel, OcclusionMask, Side, Sweep,
};
pub use train::{
    eval_nll, split_indices, token_accuracy, train_nmt, LogRow, TrainConfig, TrainLog,
};
pub use vocab::Vocab;
