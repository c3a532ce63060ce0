//! Transductive few-shot classification with per-episode adaptive
//! Mahalanobis metrics.
//!
//! The pipeline samples an N-way K-shot episode, builds a closed-form
//! metric from the episode's pairwise constraints and covariance
//! ([`metric`]), and classifies the whole query set at once with
//! bi-directional similarities ([`bisim`]). [`trainer`] fits small
//! embeddings episodically, [`harness`] runs trial batches and ablations.

pub mod bisim;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod metric;
pub mod sampler;
pub mod synth;
pub mod tim;
pub mod trainer;

pub use data::{
    Dataset, EmbeddingVector, Episode, EpisodeConfig, EpisodeItem, MetricHyperParams, MetricMatrix, Prior,
    PrototypeBank, UnlabeledItem,
};
pub use error::{Result, TeamError};
