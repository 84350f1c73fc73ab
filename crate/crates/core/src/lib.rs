//! Generative sequence engine for tokenized multimodal longitudinal
//! measurements: quantile tokenizer, decoder-only transformer with query
//! injection, composite training objective, evaluation statistics and
//! intervention-conditioned simulation.

pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod intervene;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod synthcohort;
pub mod vocab;

#[doc(hidden)]
pub mod testutil;

pub use corpus::{AugmentConfig, Event, ParticipantRecord, Sex, TokenSequence};
pub use error::{Error, Result};
pub use model::{Checkpoint, MaskKind, Model, ModelConfig, ModelInput};
pub use vocab::{Measurement, ModalityDef, ModalityKind, ModalitySpec, Vocabulary};
pub use evalharness::{MetricReport, Predictions, ProbeContext};
pub use intervene::{ArmOptions, ArmResult, InterventionKind, InterventionSpec, TrialSpec};
pub use objective::{TrainConfig, TrainOutcome};
pub use synthcohort::{GeneratorConfig, GroundTruth};

/// Library version recorded in checkpoints and report headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
