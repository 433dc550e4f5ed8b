//! Desk-scale experiment: a trigram neural language model trained on
//! synthetic correct/incorrect sequence pairs with and without dynamic
//! reweighting.

pub mod corpus;
pub mod model;
pub mod rng;
pub mod train;

pub use corpus::{gen_corpus, prepare, SyntheticTask, TrainExample, VOCAB_SIZE};
pub use model::ToyModel;
pub use rng::ToyRng;
pub use train::{
    compare, evaluate, grad_check, summary_table, train, Metrics, Mode, SeedComparison, ToyError, TrainConfig,
    TrainReport, WeightRefresh,
};
