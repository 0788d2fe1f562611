//! Distilled discriminative clustering for unsupervised domain adaptation.
//!
//! The crate trains a small feature extractor and classifier jointly on
//! labelled source data and unlabelled target data. Target data is clustered
//! with a confidence-filtered entropy loss, a soft Fisher-like criterion on
//! running centroids, and a centroid-classification loss that pins cluster
//! order to the classifier outputs; parallel supervised losses on the source
//! distil its discriminative structure into the shared network.
//!
//! Everything sits on the small reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod centroids;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use config::ExperimentConfig;
pub use data::{Dataset, Standardizer};
pub use error::{Error, Result};
pub use model::{AdaptationModel, Architecture};
pub use objectives::{LossBreakdown, LossConfig, VariantFlags};
pub use schedule::ScheduleConfig;
pub use tensor::Tensor;
pub use trainer::{DomainTask, EpochRecord, TrainConfig, TrainState, Variant};
