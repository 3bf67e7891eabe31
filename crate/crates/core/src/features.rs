//! Fixed-length feature vectors consumed by the energy cost model.

use serde::{Deserialize, Serialize};

use crate::counters::{derive_counters, CounterError, CounterSet};
use crate::measure::DeviceConfig;
use crate::opspace::{OperatorSpec, Schedule};

/// Version tag of the feature layout below. Models record it and refuse
/// vectors carrying a different tag.
pub const FEATURE_SCHEMA: &str = "etune-features-v1";

pub const FEATURE_NAMES: [&str; 17] = [
    "log_flops",
    "log_int_ops",
    "log_glb_ld",
    "log_glb_st",
    "log_shared_ld",
    "log_shared_st",
    "vector_width",
    "unroll_depth",
    "loop_levels",
    "log_innermost_trip",
    "log_reduction_steps",
    "log_grid",
    "log_block",
    "sm_efficiency",
    "log_active_sms",
    "arithmetic_intensity",
    "log_shared_footprint",
];

pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub schema: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector {
            schema: FEATURE_SCHEMA.to_string(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn log_count(v: u64) -> f64 {
    (v as f64).ln_1p()
}

/// Loops of the tiled nest whose trip count exceeds one.
fn loop_levels(op: &OperatorSpec, s: &Schedule) -> u64 {
    let shape = op.gemm();
    let trips = [
        shape.batch / s.batch.block,
        shape.m / s.m.block,
        shape.n / s.n.block,
        s.batch.block / s.batch.thread,
        s.m.block / s.m.thread,
        s.n.block / s.n.thread,
        s.k_split,
        s.k_tile(&shape),
        s.batch.thread,
        s.m.thread,
        s.n.thread,
    ];
    trips.iter().filter(|&&t| t > 1).count() as u64
}

/// Builds the feature vector from precomputed counters.
pub fn from_counters(op: &OperatorSpec, s: &Schedule, c: &CounterSet) -> FeatureVector {
    let shape = op.gemm();
    let intensity = c.flops as f64 / (c.glb_ld + c.glb_st + 1) as f64;
    FeatureVector::new(vec![
        log_count(c.flops),
        log_count(c.int_ops),
        log_count(c.glb_ld),
        log_count(c.glb_st),
        log_count(c.shared_ld),
        log_count(c.shared_st),
        s.vector as f64,
        s.unroll as f64,
        loop_levels(op, s) as f64,
        log_count(s.n.thread),
        log_count(s.reduction_steps()),
        log_count(c.grid),
        log_count(c.block),
        c.sm_efficiency,
        log_count(c.active_sms),
        intensity,
        log_count(s.shared_footprint(&shape)),
    ])
}

pub fn extract(op: &OperatorSpec, s: &Schedule, dev: &DeviceConfig) -> Result<FeatureVector, CounterError> {
    let c = derive_counters(op, s, dev)?;
    Ok(from_counters(op, s, &c))
}
