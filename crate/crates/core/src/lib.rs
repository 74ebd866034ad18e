//! Multilingual translation lab: a tape-based autodiff engine, a small
//! transformer with language-tag conditioning, the low-rank language
//! embedding and contrastive decoder objective, a synthetic multilingual
//! corpus and a representation-analysis toolkit.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use config::{ExperimentConfig, Variant};
pub use corpus::{DatasetSplits, Direction, LanguageSet, TaggedExample};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{BeamOptions, LayerTrace, Model, ModelParams, TransformerConfig};
pub use train::TrainConfig;
