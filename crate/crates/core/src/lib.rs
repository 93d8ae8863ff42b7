//! Planner for 3D-parallel (pipeline, data, tensor) training strategies on
//! heterogeneous clusters.
//!
//! Types are generic over the floating-point scalar; the aliases at the crate
//! root fix it to `f64`, with `f32` variants under [`f32`].

pub mod cost;
pub mod error;
pub mod optimizer;
pub mod pipeline_dp;
pub mod placement;
pub mod report;
pub mod scalar;
pub mod simulator;
pub mod types;

pub use error::{PlanError, Result};
pub use scalar::Scalar;
pub use types::{LayerAssignment, ParallelismDegrees, Placement, Strategy};

pub type ModelGraph = types::ModelGraph<f64>;
pub type Cluster = types::Cluster<f64>;
pub type ProfileTable = types::ProfileTable<f64>;
pub type CostBreakdown = cost::CostBreakdown<f64>;
pub type CandidateRecord = optimizer::CandidateRecord<f64>;
pub type SimResult = simulator::SimResult<f64>;

/// Single-precision aliases.
pub mod f32 {
    pub type ModelGraph = crate::types::ModelGraph<f32>;
    pub type Cluster = crate::types::Cluster<f32>;
    pub type ProfileTable = crate::types::ProfileTable<f32>;
    pub type CostBreakdown = crate::cost::CostBreakdown<f32>;
    pub type CandidateRecord = crate::optimizer::CandidateRecord<f32>;
    pub type SimResult = crate::simulator::SimResult<f32>;
}
