//! Query-based temporal repetition counting.
//!
//! A sequence of frame features is encoded with windowed self-attention, the
//! most confident tokens seed a set of action queries, and a decoder refines
//! them into cycle intervals. Training matches predictions to annotated
//! cycles one-to-one; the count is the number of queries classified as
//! repetitive.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matcher;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use eval::{ComplexityRecord, MaeNormalization, MetricReport, Metrics, SweepRow};
pub use geometry::{Interval, PositionLossWeights};
pub use matcher::{Assignment, CostMatrix, TargetSet};
pub use model::{ModelConfig, PredictionSet, QueryModel};
pub use objective::{LossReport, LossWeights};
pub use synth::{GeneratorConfig, PeriodClass, SequenceSample};
pub use train::{LrSchedule, RunConfig, TrainConfig};
