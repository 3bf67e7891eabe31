//! Measurement backends and persistence of measurement records.
//!
//! The simulated backend decomposes board power into a constant part, a
//! static part proportional to the number of active SMs, and a dynamic part
//! paid per executed event. Latency follows a roofline: a launch floor plus
//! the larger of compute time and global-memory time. The power sampler
//! mimics a 30-50 Hz vendor power API: the kernel is repeated until enough
//! samples are collected and the average sample is taken as its power.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::counters::{derive_counters, CounterError, CounterSet};
use crate::opspace::{Candidate, CandidateId};

pub const PROFILE_VERSION: u32 = 1;

/// Relative tolerance of the stored `energy = power * latency` identity.
pub const ENERGY_IDENTITY_RTOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("measurement backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no recorded measurement for candidate {0}")]
    TraceMiss(CandidateId),
    #[error("inconsistent measurement at line {line}: {reason}")]
    Consistency { line: usize, reason: String },
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
    #[error("device profile version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Counters(#[from] CounterError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coefficients of the simulated GPU. Energies are in nanojoules per event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub profile_version: u32,
    pub name: String,
    pub num_sms: u64,
    pub constant_power_w: f64,
    pub static_power_per_sm_w: f64,
    pub dynamic_energy_per_flop_nj: f64,
    pub dynamic_energy_per_glb_access_nj: f64,
    pub dynamic_energy_per_shared_access_nj: f64,
    pub base_throughput_flops_per_s_per_sm: f64,
    pub mem_bandwidth_elems_per_s: f64,
    /// Launch overhead; the latency of a kernel that does no work.
    pub latency_floor_ms: f64,
    pub sampler_hz: f64,
    /// Pre-heating time before sampling starts; the power multiplier ramps
    /// from 0.95 to 1.0 over this window.
    pub warmup_s: f64,
    pub min_iterations: u64,
    /// Minimum sampled wall time per measurement.
    pub min_sample_s: f64,
    /// Relative standard deviation of each power sample.
    pub noise_sigma_rel: f64,
    pub rng_seed: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self::a100_like()
    }
}

impl DeviceConfig {
    /// The shipped default profile, mirrored in `profiles/a100-like.json`.
    pub fn a100_like() -> Self {
        DeviceConfig {
            profile_version: PROFILE_VERSION,
            name: "a100-like".into(),
            num_sms: 108,
            constant_power_w: 52.0,
            static_power_per_sm_w: 0.55,
            dynamic_energy_per_flop_nj: 0.007,
            dynamic_energy_per_glb_access_nj: 0.18,
            dynamic_energy_per_shared_access_nj: 0.024,
            base_throughput_flops_per_s_per_sm: 1.8e11,
            mem_bandwidth_elems_per_s: 3.9e11,
            latency_floor_ms: 0.002,
            sampler_hz: 50.0,
            warmup_s: 2.0,
            min_iterations: 1000,
            min_sample_s: 2.0,
            noise_sigma_rel: 0.03,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.profile_version != PROFILE_VERSION {
            return Err(MeasureError::VersionMismatch {
                found: self.profile_version,
                expected: PROFILE_VERSION,
            });
        }
        let positive = [
            ("constant_power_w", self.constant_power_w),
            ("static_power_per_sm_w", self.static_power_per_sm_w),
            ("dynamic_energy_per_flop_nj", self.dynamic_energy_per_flop_nj),
            ("dynamic_energy_per_glb_access_nj", self.dynamic_energy_per_glb_access_nj),
            ("dynamic_energy_per_shared_access_nj", self.dynamic_energy_per_shared_access_nj),
            ("base_throughput_flops_per_s_per_sm", self.base_throughput_flops_per_s_per_sm),
            ("mem_bandwidth_elems_per_s", self.mem_bandwidth_elems_per_s),
            ("latency_floor_ms", self.latency_floor_ms),
            ("min_sample_s", self.min_sample_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MeasureError::InvalidProfile(format!("{name} must be positive, got {v}")));
            }
        }
        if self.num_sms == 0 || self.min_iterations == 0 {
            return Err(MeasureError::InvalidProfile("num_sms and min_iterations must be >= 1".into()));
        }
        if !(30.0..=50.0).contains(&self.sampler_hz) {
            return Err(MeasureError::InvalidProfile(format!(
                "sampler_hz must lie in [30, 50], got {}",
                self.sampler_hz
            )));
        }
        if !(self.warmup_s >= 0.0 && self.noise_sigma_rel >= 0.0) {
            return Err(MeasureError::InvalidProfile("warmup_s and noise_sigma_rel must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MeasureError> {
        let text = fs::read_to_string(path)?;
        let dev: DeviceConfig = serde_json::from_str(&text).map_err(io::Error::from)?;
        dev.validate()?;
        Ok(dev)
    }

    pub fn save(&self, path: &Path) -> Result<(), MeasureError> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::from)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub candidate_id: CandidateId,
    pub latency_ms: f64,
    pub avg_power_w: f64,
    /// `avg_power_w * latency_ms`, in millijoules.
    pub energy_mj: f64,
    pub iterations: u64,
    pub backend: String,
    /// Unix time in milliseconds when the record was taken.
    pub timestamp_ms: u64,
}

impl MeasurementRecord {
    pub fn new(candidate_id: CandidateId, latency_ms: f64, avg_power_w: f64, iterations: u64, backend: &str) -> Self {
        MeasurementRecord {
            candidate_id,
            latency_ms,
            avg_power_w,
            energy_mj: avg_power_w * latency_ms,
            iterations,
            backend: backend.to_string(),
            timestamp_ms: now_ms(),
        }
    }

    /// Checks positivity and the energy identity.
    pub fn check(&self) -> Result<(), String> {
        if !(self.latency_ms > 0.0 && self.avg_power_w > 0.0 && self.energy_mj > 0.0) {
            return Err(format!(
                "latency {} ms, power {} W and energy {} mJ must all be positive",
                self.latency_ms, self.avg_power_w, self.energy_mj
            ));
        }
        let expected = self.avg_power_w * self.latency_ms;
        if (self.energy_mj - expected).abs() > ENERGY_IDENTITY_RTOL * expected.abs() {
            return Err(format!(
                "energy {} mJ != power {} W x latency {} ms = {expected}",
                self.energy_mj, self.avg_power_w, self.latency_ms
            ));
        }
        Ok(())
    }

    /// Equality on every field except the timestamp.
    pub fn same_measurement(&self, other: &Self) -> bool {
        MeasurementRecord {
            timestamp_ms: 0,
            ..self.clone()
        } == MeasurementRecord {
            timestamp_ms: 0,
            ..other.clone()
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Noise-free power (W) and latency (ms) of a kernel with the given counters.
pub fn sim_true_power_and_latency(c: &CounterSet, dev: &DeviceConfig) -> (f64, f64) {
    let compute_s = if c.flops == 0 {
        0.0
    } else {
        c.flops as f64 / (c.active_sms as f64 * dev.base_throughput_flops_per_s_per_sm * c.sm_efficiency)
    };
    let memory_s = c.global_accesses() as f64 / dev.mem_bandwidth_elems_per_s;
    let latency_ms = dev.latency_floor_ms + 1e3 * compute_s.max(memory_s);

    let dynamic_mj = 1e-6
        * (c.flops as f64 * dev.dynamic_energy_per_flop_nj
            + c.global_accesses() as f64 * dev.dynamic_energy_per_glb_access_nj
            + c.shared_accesses() as f64 * dev.dynamic_energy_per_shared_access_nj);
    let power_w =
        dev.constant_power_w + dev.static_power_per_sm_w * c.active_sms as f64 + dynamic_mj / latency_ms;
    (power_w, latency_ms)
}

/// Share of constant plus static power in the total power of a kernel.
pub fn idle_power_share(c: &CounterSet, dev: &DeviceConfig) -> f64 {
    let (power, _) = sim_true_power_and_latency(c, dev);
    (dev.constant_power_w + dev.static_power_per_sm_w * c.active_sms as f64) / power
}

/// Power samples of one simulated measurement session.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub true_power_w: f64,
    pub latency_ms: f64,
    pub iterations: u64,
    /// Samples taken while pre-heating; discarded from the average.
    pub warmup_samples: Vec<f64>,
    pub samples: Vec<f64>,
    /// Mean of `samples`.
    pub avg_power_w: f64,
}

impl PowerTrace {
    /// Simulated wall time spent on the session, in seconds.
    pub fn wall_time_s(&self, dev: &DeviceConfig) -> f64 {
        dev.warmup_s + self.iterations as f64 * self.latency_ms * 1e-3
    }
}

fn candidate_seed(dev_seed: u64, id: CandidateId) -> u64 {
    let mut h = Sha256::new();
    h.update(dev_seed.to_le_bytes());
    h.update(id.0.to_le_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Runs the simulated sampling session for one candidate. Pure in
/// `(candidate, dev)`: the noise stream is seeded from both.
pub fn nvml_sim_trace(candidate: &Candidate, dev: &DeviceConfig) -> Result<PowerTrace, MeasureError> {
    let counters = derive_counters(&candidate.op, &candidate.schedule, dev)?;
    let (true_power_w, latency_ms) = sim_true_power_and_latency(&counters, dev);

    let period_s = 1.0 / dev.sampler_hz;
    let by_time = (dev.min_sample_s * 1e3 / latency_ms).ceil() as u64;
    let iterations = dev.min_iterations.max(by_time);
    let run_s = iterations as f64 * latency_ms * 1e-3;
    let n_samples = ((run_s / period_s + 1e-9).floor() as usize).max(1);
    let n_warmup = (dev.warmup_s / period_s + 1e-9).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(dev.rng_seed, candidate.id));
    let noise = Normal::new(0.0, dev.noise_sigma_rel)
        .map_err(|e| MeasureError::InvalidProfile(format!("noise_sigma_rel: {e}")))?;
    let factor = |t: f64, rng: &mut ChaCha8Rng| {
        let ramp = if dev.warmup_s > 0.0 {
            0.95 + 0.05 * (t / dev.warmup_s).min(1.0)
        } else {
            1.0
        };
        ramp * (1.0 + noise.sample(rng))
    };
    let warmup_factors: Vec<f64> = (0..n_warmup).map(|i| factor(i as f64 * period_s, &mut rng)).collect();
    let factors: Vec<f64> = (0..n_samples)
        .map(|i| factor(dev.warmup_s + i as f64 * period_s, &mut rng))
        .collect();
    let mean_factor = factors.iter().sum::<f64>() / factors.len() as f64;

    Ok(PowerTrace {
        true_power_w,
        latency_ms,
        iterations,
        warmup_samples: warmup_factors.iter().map(|f| f * true_power_w).collect(),
        samples: factors.iter().map(|f| f * true_power_w).collect(),
        avg_power_w: true_power_w * mean_factor,
    })
}

pub fn nvml_sim_measure(candidate: &Candidate, dev: &DeviceConfig) -> Result<MeasurementRecord, MeasureError> {
    let trace = nvml_sim_trace(candidate, dev)?;
    Ok(MeasurementRecord::new(
        candidate.id,
        trace.latency_ms,
        trace.avg_power_w,
        trace.iterations,
        SimBackend::TAG,
    ))
}

/// Source of latency and energy measurements.
///
/// Implementations must be deterministic for their configured seed.
pub trait Backend: Sync {
    fn tag(&self) -> &str;

    /// Per-iteration latency in milliseconds (the cheap measurement).
    fn latency_ms(&self, candidate: &Candidate) -> Result<f64, MeasureError>;

    /// Full power/energy measurement (the expensive one).
    fn measure(&self, candidate: &Candidate) -> Result<MeasurementRecord, MeasureError>;
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    pub dev: DeviceConfig,
}

impl SimBackend {
    pub const TAG: &'static str = "sim";

    pub fn new(dev: DeviceConfig) -> Self {
        SimBackend { dev }
    }
}

impl Backend for SimBackend {
    fn tag(&self) -> &str {
        Self::TAG
    }

    fn latency_ms(&self, candidate: &Candidate) -> Result<f64, MeasureError> {
        let c = derive_counters(&candidate.op, &candidate.schedule, &self.dev)?;
        Ok(sim_true_power_and_latency(&c, &self.dev).1)
    }

    fn measure(&self, candidate: &Candidate) -> Result<MeasurementRecord, MeasureError> {
        nvml_sim_measure(candidate, &self.dev)
    }
}

/// Placeholder for on-hardware measurement through the vendor power API.
///
/// A real implementation would pre-heat the device for `warmup_s`, launch the
/// kernel repeatedly while polling board power at the highest supported rate,
/// and report the mean sample times the single-run latency. This build has no
/// GPU access, so every call fails with `BackendUnavailable`.
#[derive(Debug, Clone, Default)]
pub struct NvmlBackend {
    pub device_index: u32,
}

impl Backend for NvmlBackend {
    fn tag(&self) -> &str {
        "nvml"
    }

    fn latency_ms(&self, _candidate: &Candidate) -> Result<f64, MeasureError> {
        Err(MeasureError::BackendUnavailable(format!(
            "nvml device {} (built without GPU support)",
            self.device_index
        )))
    }

    fn measure(&self, _candidate: &Candidate) -> Result<MeasurementRecord, MeasureError> {
        Err(MeasureError::BackendUnavailable(format!(
            "nvml device {} (built without GPU support)",
            self.device_index
        )))
    }
}

/// Measurements loaded from a JSONL log, indexed by candidate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementLog {
    records: Vec<MeasurementRecord>,
    index: HashMap<CandidateId, usize>,
}

impl MeasurementLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record; a later record for the same candidate shadows earlier ones.
    pub fn push(&mut self, record: MeasurementRecord) {
        self.index.insert(record.candidate_id, self.records.len());
        self.records.push(record);
    }

    pub fn get(&self, id: CandidateId) -> Option<&MeasurementRecord> {
        self.index.get(&id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FromIterator<MeasurementRecord> for MeasurementLog {
    fn from_iter<I: IntoIterator<Item = MeasurementRecord>>(iter: I) -> Self {
        let mut log = MeasurementLog::new();
        for r in iter {
            log.push(r);
        }
        log
    }
}

/// Appends one record as a JSON line.
pub fn log_append(path: &Path, record: &MeasurementRecord) -> Result<(), MeasureError> {
    let mut line = serde_json::to_string(record).map_err(io::Error::from)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Loads a JSONL log, checking the energy identity on every line.
pub fn log_load(path: &Path) -> Result<MeasurementLog, MeasureError> {
    let reader = BufReader::new(File::open(path)?);
    let mut log = MeasurementLog::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MeasurementRecord = serde_json::from_str(&line).map_err(|e| MeasureError::Consistency {
            line: i + 1,
            reason: format!("malformed record: {e}"),
        })?;
        record
            .check()
            .map_err(|reason| MeasureError::Consistency { line: i + 1, reason })?;
        log.push(record);
    }
    Ok(log)
}

/// Replays recorded measurements instead of running kernels.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    log: MeasurementLog,
}

impl ReplayBackend {
    pub fn new(log: MeasurementLog) -> Self {
        ReplayBackend { log }
    }

    pub fn open(path: &Path) -> Result<Self, MeasureError> {
        Ok(Self::new(log_load(path)?))
    }
}

pub fn replay_measure(log: &MeasurementLog, candidate: &Candidate) -> Result<MeasurementRecord, MeasureError> {
    log.get(candidate.id)
        .cloned()
        .ok_or(MeasureError::TraceMiss(candidate.id))
}

impl Backend for ReplayBackend {
    fn tag(&self) -> &str {
        "replay"
    }

    fn latency_ms(&self, candidate: &Candidate) -> Result<f64, MeasureError> {
        Ok(replay_measure(&self.log, candidate)?.latency_ms)
    }

    fn measure(&self, candidate: &Candidate) -> Result<MeasurementRecord, MeasureError> {
        replay_measure(&self.log, candidate)
    }
}
