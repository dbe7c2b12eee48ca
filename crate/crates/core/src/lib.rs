//! Desk-scale multi-source boundless domain adaptation for semantic
//! segmentation: adversarial single-source pretraining, discriminator-based
//! best-source selection, an alternating self-training loop with supervised /
//! pseudo-label / multi-source-distillation losses, and open-set relabeling by
//! confidence thresholding — exercised on procedurally generated toy scenes.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]);
//! the aliases at the crate root fix `f64`, which is what the pipeline, the
//! file formats, and the reference checks use.

pub mod autodiff;
pub mod data_synth;
pub mod error;
pub mod io;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod models;
pub mod pseudo;
pub mod rng;
pub mod scalar;
pub mod source_select;
pub mod trainer;

pub use error::{Error, Result};
pub use maps::{LabelMap, IGNORE_LABEL};

/// Scalar type of the concrete pipeline.
pub type Real = f64;

pub type Tensor = autodiff::Tensor<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type Gradients = autodiff::Gradients<Real>;
pub type Sgd = autodiff::Sgd<Real>;
pub type ProbMap = maps::ProbMap<Real>;
pub type SegNet = models::SegNet<Real>;
pub type Discriminator = models::Discriminator<Real>;
pub type ModelBundle = models::ModelBundle<Real>;
pub type LossWeights = losses::LossWeights<Real>;
pub type PseudoLabels = pseudo::PseudoLabels<Real>;
pub type DissimilarityReport = source_select::DissimilarityReport<Real>;
pub type TrainConfig = trainer::TrainConfig<Real>;
pub type AltIncState = trainer::AltIncState<Real>;
pub type DomainDataset = data_synth::DomainDataset<Real>;
pub type SceneConfig = data_synth::SceneConfig;
