//! Reliability-aware multi-scale token aggregation for irregular event
//! streams, with a budgeted token router and a selective state-space encoder
//! for binary outcome prediction.
//!
//! The pipeline, in order:
//!
//! 1. [`event_store`]: event logs or a synthetic cohort become regular-grid
//!    [`EventWindow`]s with masks and per-variable gaps.
//! 2. [`tokenizer`]: each grid cell becomes a token with continuous-value
//!    embeddings of time, value, variable and staleness.
//! 3. [`reliability`]: per-variable learnable exponential decay turns mask
//!    and gap into a reliability weight per token.
//! 4. [`aggregator`]: tokens are bucketed at several scales, pooled with the
//!    reliability weights, augmented with dispersion and bucket statistics,
//!    and woven into one time-ordered sequence.
//! 5. [`router`]: soft gating while training, hard top-k selection with
//!    chronological reordering at inference.
//! 6. [`ssm`]: a stack of selective state-space blocks and a last-token head.
//!
//! [`train`] and [`experiment`] hold the optimizer, early stopping, metrics
//! and the seed-averaged ablation and sweep drivers; [`checkpoint`] saves
//! and restores trained models.

pub mod aggregator;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod event_store;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reliability;
pub mod router;
pub mod ssm;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use event_store::{CohortSpec, EventRecord, EventWindow};
pub use metrics::MetricsReport;
pub use model::{Ablation, Model, ModelConfig, WeavingMode};
pub use train::TrainConfig;
