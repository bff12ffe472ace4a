//! Performativity-aware prediction under label shift.
//!
//! A frozen classifier's per-class accuracies drive the next round's label
//! marginals; an adapter network learns that mapping online and re-weights
//! the classifier's posteriors toward the anticipated prior. The crate
//! provides the synthetic world, backbones, the shift mechanism, the adapter,
//! the comparison strategies and the retraining-trajectory engine.
//!
//! Probability, mechanism and adapter math is generic over [`Scalar`]
//! (`f32`/`f64`); the simulation layer runs in `f64` through the aliases
//! below.

pub mod adapter;
pub mod backbone;
pub mod baselines;
pub mod error;
pub mod mechanism;
pub mod optim;
pub mod scalar;
pub mod simplex;
pub mod trajectory;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Label marginals in double precision.
pub type LabelMarginals = simplex::Marginals<f64>;
/// Label marginals in single precision.
pub type LabelMarginalsF32 = simplex::Marginals<f32>;
/// Per-class accuracy statistic in double precision.
pub type SufficientStatistic = simplex::ClassAccuracies<f64>;
/// Per-class accuracy statistic in single precision.
pub type SufficientStatisticF32 = simplex::ClassAccuracies<f32>;
/// Marginal-predicting adapter network in double precision.
pub type AdapterNet = adapter::Mlp<f64>;
/// Marginal-predicting adapter network in single precision.
pub type AdapterNetF32 = adapter::Mlp<f32>;
/// Decayed replay buffer in double precision.
pub type MemoryBuffer = adapter::ReplayBuffer<f64>;
/// Buffer entry in double precision.
pub type BufferEntry = adapter::Entry<f64>;

pub use backbone::{Backbone, DecisionRule, FinetuneScope};
pub use baselines::Strategy;
pub use mechanism::ShiftConfig;
pub use trajectory::{TrajectoryConfig, TrajectoryRecord, TrajectoryState};
pub use world::{LabeledSample, WorldSpec};
