//! Gradient-weight alignment (GWA) engine.
//!
//! Computes per-sample alignment between the closed-form negative gradient
//! of a softmax classifier head and the head weights, tracks the per-epoch
//! alignment distribution with streaming moments, and turns the resulting
//! series into checkpoint-selection decisions without a validation set.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases. Trace ingestion
//! always widens `f32` telemetry to `f64`.

pub mod alignment;
pub mod controller;
pub mod hash;
pub mod ingest;
pub mod moments;
pub mod projection;
pub mod scalar;
pub mod trace;

pub use alignment::{
    alignment, head_gradient, pairwise_alignment, AlignmentConfig, AlignmentError,
    AlignmentScore, HeadSnapshot, SampleRecord, SampleView,
};
pub use controller::{
    labelwave, select_finetune, select_scratch, Criterion, FinetuneConfig, StopDecision,
};
pub use ingest::{ingest_stream, offline_recompute, EngineConfig, OnlineEstimator, Trace};
pub use moments::{CentralMoments, EpochDistribution, EpochFlag, EpochSummary, GwaSeries};
pub use projection::{ProjectionConfig, ProjectionSpec};
pub use scalar::Scalar;
pub use trace::{TraceError, TraceHeader, TraceReader, TraceWriter};

pub type SampleRecordF32 = SampleRecord<f32>;
pub type SampleRecordF64 = SampleRecord<f64>;
pub type HeadSnapshotF32 = HeadSnapshot<f32>;
pub type HeadSnapshotF64 = HeadSnapshot<f64>;
pub type AlignmentScoreF32 = AlignmentScore<f32>;
pub type AlignmentScoreF64 = AlignmentScore<f64>;
pub type CentralMomentsF64 = CentralMoments<f64>;
pub type EpochDistributionF64 = EpochDistribution<f64>;
pub type ProjectionSpecF32 = ProjectionSpec<f32>;
pub type ProjectionSpecF64 = ProjectionSpec<f64>;
