//! Continual-learning benchmark engine: synthetic CORe50-style streams,
//! small MLP learners with hand-written gradients, replay memories, the
//! competition strategies and the scoring used to rank them.
//!
//! Numeric code is generic over the scalar type (`f32`, `f64`, and exact
//! rationals where only ring operations are needed). Training runs use `f64`.

pub mod container;
pub mod error;
pub mod evalmetrics;
pub mod harness;
pub mod memory;
pub mod model;
pub mod scalar;
pub mod strategies;
pub mod streamgen;

pub use error::{Error, Result};
pub use scalar::{Real, Ring};

/// Exact rational scalar used by brute-force checks.
pub type Exact = num_rational::Rational64;

pub type Mlp = model::MlpParams<f64>;
pub type Mlp32 = model::MlpParams<f32>;
pub type Gradient = model::GradientVector<f64>;
pub type Trace = model::ForwardTrace<f64>;
pub type ExactTrace = model::ForwardTrace<Exact>;
pub type Heads = model::HeadSet<f64>;
pub type Reservoir = memory::ReservoirMemory<f64>;
pub type Quota = memory::QuotaMemory<f64>;
pub type Growing = memory::GrowingMemory<f64>;
pub type Metrics = evalmetrics::RunMetrics<f64>;
