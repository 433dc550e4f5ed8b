//! Fault-aware fine-tuning toolkit.
//!
//! The pipeline pairs every correct solution of an instruction-tuning set
//! with a similar but incorrect variant ([`augment`]), locates the
//! error-sensitive segments between the two at line and character
//! granularity ([`diff`], [`align`]), stores per-token hybrid masks
//! ([`dataset`]) and turns model probabilities on both sides into a
//! dynamically weighted loss ([`weighting`]). [`toy`] checks the loss on a
//! model small enough to train in seconds.

pub mod align;
pub mod augment;
pub mod dataset;
pub mod diff;
pub mod scalar;
pub mod toy;
pub mod weighting;

pub use align::{build_pair_masks, MaskSet, TokenSpans, Tokenizer};
pub use dataset::{MaskedRecord, PairRecord};
pub use diff::{EditScript, LineDiff};
pub use scalar::Scalar;

pub type WeightConfig64 = weighting::WeightConfig<f64>;
pub type WeightConfig32 = weighting::WeightConfig<f32>;
pub type SampleWeights64 = weighting::SampleWeights<f64>;
pub type ToyModel64 = toy::ToyModel<f64>;
pub type ToyModel32 = toy::ToyModel<f32>;
