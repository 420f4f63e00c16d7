//! Sequential active domain adaptation for multi-modal volumetric
//! segmentation, at desk scale.
//!
//! A source model trained on one synthetic domain is adapted to a shifted
//! target domain by querying a handful of target samples for annotation on
//! a growing-stride schedule. Candidates are ranked by predictive
//! uncertainty, predicted foreground volume and density in a
//! Wasserstein-distance embedding of the pool; for each query the single
//! most informative modality is elected for annotation.

pub mod active;
pub mod election;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod scoring;
pub mod volume;

pub use active::{run_active_loop, run_oneoff_loop, LoopConfig, RunRecord, Strategy};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ModalityMode};
pub use model::{SegModel, TrainConfig};
pub use phantom::{Dataset, DomainSpec};
pub use volume::{Dims, LabelMask, MultiModalSample, ProbabilityMap, Volume3D};
