//! Synthetic corpora, compatibility pairing, the tensor bundle format and the
//! on-disk dataset layout.

pub mod bundle;
pub mod manifest;
pub mod synth;

pub use bundle::{read_bundle, write_bundle, Entry, TensorBundle};
pub use manifest::{load_dataset, save_dataset};
pub use synth::{
    generate_synthetic, pair_for_compatibility, question_pool, PooledQuestion, PretrainSample, QuestionKind, Split,
    SplitCounts, SynthConfig, SyntheticCorpus, VqaSample,
};
