//! Energy-aware evolutionary schedule search.
//!
//! Every round breeds a generation from the parents, keeps the `m` fastest
//! offspring by measured latency, screens those with the energy model,
//! physically measures a fraction `k` of them, retrains the model and adapts
//! `k` to the model's accuracy.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::energymodel::{self, snr_db, BoostParams, EnergyModel, EnergySample, ModelError};
use crate::features::{extract, FeatureVector, FEATURE_SCHEMA};
use crate::measure::{Backend, DeviceConfig, MeasureError, MeasurementRecord};
use crate::opspace::{reproduce, sample_random, Candidate, CandidateId, GeneticRates, OperatorSpec, SpaceError, SpaceLimits};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Counters(#[from] crate::counters::CounterError),
}

/// How the SNR is compared with `mu_db`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorSemantics {
    /// SNR is an accuracy score: below `mu_db` the model is poor and `k` grows.
    #[default]
    Snr,
    /// SNR below `mu_db` is read as a small error and `k` shrinks.
    Inverted,
}

/// Fraction of latency-filtered candidates whose energy is measured.
///
/// `k` is held in whole percent so repeated steps stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KController {
    pub k_pct: u32,
    pub step_pct: u32,
    pub semantics: ErrorSemantics,
    /// When false `k` never changes.
    pub adapt: bool,
}

impl KController {
    pub fn new(k: f64, step: f64, semantics: ErrorSemantics, adapt: bool) -> Result<Self, SearchError> {
        let pct = |v: f64, what: &str| {
            let p = (v * 100.0).round();
            if !(0.0..=100.0).contains(&p) || (p - v * 100.0).abs() > 1e-6 {
                Err(SearchError::InvalidConfig(format!("{what} {v} must be a whole percentage in [0, 1]")))
            } else {
                Ok(p as u32)
            }
        };
        Ok(KController {
            k_pct: pct(k, "k")?,
            step_pct: pct(step, "k step")?,
            semantics,
            adapt,
        })
    }

    pub fn k(&self) -> f64 {
        self.k_pct as f64 / 100.0
    }

    /// `ceil(k * m)`, never below one.
    pub fn select_count(&self, m: usize) -> usize {
        (((self.k_pct as usize) * m).div_ceil(100)).max(1)
    }

    /// Applies one observation and returns the new controller.
    pub fn update(self, snr_db: f64, mu_db: f64) -> Self {
        if !self.adapt {
            return self;
        }
        let poor = match self.semantics {
            ErrorSemantics::Snr => snr_db < mu_db,
            ErrorSemantics::Inverted => snr_db >= mu_db,
        };
        let k_pct = if poor {
            (self.k_pct + self.step_pct).min(100)
        } else {
            self.k_pct.saturating_sub(self.step_pct)
        };
        KController { k_pct, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Candidates kept per round after the latency filter.
    pub m: usize,
    pub generation_size: usize,
    pub k_init: f64,
    pub k_step: f64,
    pub mu_db: f64,
    pub max_rounds: usize,
    /// Rounds without improvement before stopping.
    pub patience: usize,
    /// Relative improvement of the best value that resets the patience count.
    pub min_improvement: f64,
    pub rng_seed: u64,
    pub rates: GeneticRates,
    pub error_semantics: ErrorSemantics,
    /// False pins `k` at `k_init`.
    pub adapt_k: bool,
    pub limits: SpaceLimits,
    pub boost: BoostParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            m: 64,
            generation_size: 256,
            k_init: 1.0,
            k_step: 0.2,
            mu_db: 20.0,
            max_rounds: 30,
            patience: 5,
            min_improvement: 1e-3,
            rng_seed: 0,
            rates: GeneticRates::default(),
            error_semantics: ErrorSemantics::Snr,
            adapt_k: true,
            limits: SpaceLimits::default(),
            boost: BoostParams::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if self.m == 0 || self.m > self.generation_size {
            return bad(format!("need 0 < m ({}) <= generation size ({})", self.m, self.generation_size));
        }
        if !self.mu_db.is_finite() {
            return bad(format!("mu_db must be finite, got {}", self.mu_db));
        }
        if !(self.min_improvement >= 0.0) {
            return bad("min_improvement must be non-negative".into());
        }
        self.rates.validate()?;
        self.boost.validate()?;
        self.controller()?;
        Ok(())
    }

    pub fn controller(&self) -> Result<KController, SearchError> {
        KController::new(self.k_init, self.k_step, self.error_semantics, self.adapt_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0 is the initial random round.
    pub round: usize,
    pub k_before: f64,
    pub k_after: f64,
    /// `None` when nothing was measured this round.
    pub snr_db: Option<f64>,
    pub latency_evaluations: usize,
    pub measurements: usize,
    pub cumulative_measurements: usize,
    pub best_id: CandidateId,
    pub best_latency_ms: f64,
    /// `None` in latency-only runs, which measure energy once at the end.
    pub best_energy_mj: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredCandidate {
    pub candidate: Candidate,
    pub features: FeatureVector,
    pub record: MeasurementRecord,
}

/// Everything carried between rounds. Rounds never mutate a state in place.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub op: OperatorSpec,
    pub round: usize,
    pub controller: KController,
    pub parents: Vec<Candidate>,
    pub model: Option<EnergyModel>,
    /// Every energy measurement so far, in measurement order.
    pub measured: Vec<MeasuredCandidate>,
    pub cumulative_measurements: usize,
    pub best: Candidate,
    pub best_latency_ms: f64,
    pub best_record: Option<MeasurementRecord>,
    pub stale_rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    pub record: MeasurementRecord,
    pub reports: Vec<RoundReport>,
    pub log: Vec<MeasurementRecord>,
}

fn derive_seed(seed: u64, round: usize, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((round as u64).to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Energy order: lower energy, then lower latency, then lower id.
fn better_record(a: &MeasurementRecord, b: &MeasurementRecord) -> bool {
    (a.energy_mj, a.latency_ms, a.candidate_id) < (b.energy_mj, b.latency_ms, b.candidate_id)
}

/// Distinct candidates with latency, the `m` fastest first (ties by id).
fn latency_filter(
    candidates: Vec<Candidate>,
    m: usize,
    backend: &dyn Backend,
) -> Result<(Vec<(Candidate, f64)>, usize), SearchError> {
    let mut seen = HashSet::new();
    let distinct: Vec<Candidate> = candidates.into_iter().filter(|c| seen.insert(c.id)).collect();
    let evaluated = distinct.len();
    let mut timed = distinct
        .into_par_iter()
        .map(|c| backend.latency_ms(&c).map(|l| (c, l)))
        .collect::<Result<Vec<_>, _>>()?;
    timed.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
    timed.truncate(m);
    Ok((timed, evaluated))
}

fn retrain(measured: &[MeasuredCandidate], cfg: &SearchConfig, round: usize) -> Result<EnergyModel, SearchError> {
    let samples = samples_of(measured)?;
    Ok(energymodel::train(&samples, &cfg.boost, derive_seed(cfg.rng_seed, round, "train"))?)
}

/// Training samples, one per candidate (its latest measurement).
fn samples_of(measured: &[MeasuredCandidate]) -> Result<Vec<EnergySample>, ModelError> {
    let mut seen = HashSet::new();
    let mut latest: Vec<&MeasuredCandidate> = measured.iter().rev().filter(|mc| seen.insert(mc.candidate.id)).collect();
    latest.reverse();
    energymodel::normalize(latest.iter().map(|mc| (mc.features.clone(), mc.record.energy_mj)).collect())
}

fn report_of(state: &SearchState, k_before: f64, snr: Option<f64>, evaluated: usize, measurements: usize) -> RoundReport {
    RoundReport {
        round: state.round,
        k_before,
        k_after: state.controller.k(),
        snr_db: snr,
        latency_evaluations: evaluated,
        measurements,
        cumulative_measurements: state.cumulative_measurements,
        best_id: state.best.id,
        best_latency_ms: state.best_record.as_ref().map_or(state.best_latency_ms, |r| r.latency_ms),
        best_energy_mj: state.best_record.as_ref().map(|r| r.energy_mj),
    }
}

/// Random generation, latency filter, and (unless `latency_only`) energy
/// measurement of the survivors plus the first model.
fn start(
    cfg: &SearchConfig,
    op: &OperatorSpec,
    backend: &dyn Backend,
    dev: &DeviceConfig,
    latency_only: bool,
) -> Result<(SearchState, RoundReport), SearchError> {
    cfg.validate()?;
    let controller = cfg.controller()?;
    let population = sample_random(op, cfg.generation_size, &cfg.limits, derive_seed(cfg.rng_seed, 0, "init"))?;
    let (kept, evaluated) = latency_filter(population, cfg.m, backend)?;
    let (best, best_latency_ms) = kept[0].clone();
    let parent_count = cfg.m.div_ceil(2);

    let mut state = SearchState {
        op: *op,
        round: 0,
        controller,
        parents: kept.iter().take(parent_count).map(|(c, _)| c.clone()).collect(),
        model: None,
        measured: Vec::new(),
        cumulative_measurements: 0,
        best,
        best_latency_ms,
        best_record: None,
        stale_rounds: 0,
    };
    if !latency_only {
        for (c, _) in &kept {
            let record = backend.measure(c)?;
            let features = extract(op, &c.schedule, dev)?;
            state.measured.push(MeasuredCandidate {
                candidate: c.clone(),
                features,
                record,
            });
        }
        state.cumulative_measurements = kept.len();
        let samples = samples_of(&state.measured)?;
        if samples.len() < 2 {
            return Err(ModelError::InsufficientData {
                needed: 2,
                got: samples.len(),
            }
            .into());
        }
        let model = retrain(&state.measured, cfg, 0)?;
        let scored = score(&model, kept.iter().map(|(c, _)| c), dev)?;
        state.parents = lowest(&scored, parent_count);
        state.model = Some(model);
        let best = state
            .measured
            .iter()
            .reduce(|a, b| if better_record(&b.record, &a.record) { b } else { a })
            .expect("measured at least one");
        state.best = best.candidate.clone();
        state.best_latency_ms = best.record.latency_ms;
        state.best_record = Some(best.record.clone());
    }
    let k = state.controller.k();
    let measurements = state.cumulative_measurements;
    let report = report_of(&state, k, None, evaluated, measurements);
    Ok((state, report))
}

/// Model scores of `candidates`, in input order.
fn score<'a>(
    model: &EnergyModel,
    candidates: impl Iterator<Item = &'a Candidate>,
    dev: &DeviceConfig,
) -> Result<Vec<(Candidate, FeatureVector, f64)>, SearchError> {
    candidates
        .map(|c| {
            let f = extract(&c.op, &c.schedule, dev)?;
            let p = model.predict(&f)?;
            Ok((c.clone(), f, p))
        })
        .collect()
}

/// The `n` lowest-scored candidates (ties by id).
fn lowest(scored: &[(Candidate, FeatureVector, f64)], n: usize) -> Vec<Candidate> {
    let mut order: Vec<&(Candidate, FeatureVector, f64)> = scored.iter().collect();
    order.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.id.cmp(&b.0.id)));
    order.into_iter().take(n).map(|s| s.0.clone()).collect()
}

/// Samples `generation_size` random candidates, keeps the `m` fastest,
/// measures their energy and trains the first model.
pub fn initial_round(
    cfg: &SearchConfig,
    op: &OperatorSpec,
    backend: &dyn Backend,
    dev: &DeviceConfig,
) -> Result<(SearchState, RoundReport), SearchError> {
    start(cfg, op, backend, dev, false)
}

/// One energy-aware round. On error the input state is untouched.
pub fn round(
    state: &SearchState,
    cfg: &SearchConfig,
    backend: &dyn Backend,
    dev: &DeviceConfig,
) -> Result<(SearchState, RoundReport), SearchError> {
    let model = state
        .model
        .as_ref()
        .ok_or_else(|| SearchError::InvalidConfig("state has no energy model".into()))?;
    let mut next = state.clone();
    next.round += 1;
    let r = next.round;

    let offspring = reproduce(&state.parents, cfg.generation_size, &cfg.rates, &cfg.limits, derive_seed(cfg.rng_seed, r, "breed"))?;
    let (kept, evaluated) = latency_filter(offspring, cfg.m, backend)?;
    let scored = score(model, kept.iter().map(|(c, _)| c), dev)?;

    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].2.total_cmp(&scored[b].2).then(scored[a].0.id.cmp(&scored[b].0.id)));
    order.truncate(state.controller.select_count(kept.len()));

    let mut predicted = Vec::with_capacity(order.len());
    let mut measured = Vec::with_capacity(order.len());
    for &i in &order {
        let (c, f, p) = &scored[i];
        let record = backend.measure(c)?;
        predicted.push(p * model.reference_energy_mj);
        measured.push(record.energy_mj);
        next.measured.push(MeasuredCandidate {
            candidate: c.clone(),
            features: f.clone(),
            record,
        });
    }
    next.cumulative_measurements += order.len();

    let snr = if measured.is_empty() {
        None
    } else {
        Some(snr_db(&predicted, &measured)?)
    };
    let k_before = state.controller.k();
    if let Some(snr) = snr {
        next.controller = state.controller.update(snr, cfg.mu_db);
    }

    let retrained = retrain(&next.measured, cfg, r)?;
    let rescored = score(&retrained, kept.iter().map(|(c, _)| c), dev)?;
    next.parents = lowest(&rescored, cfg.m.div_ceil(2));
    next.model = Some(retrained);

    let previous = state.best_record.as_ref().expect("energy state has a best record");
    let mut best = previous.clone();
    for mc in &next.measured[state.measured.len()..] {
        if better_record(&mc.record, &best) {
            best = mc.record.clone();
            next.best = mc.candidate.clone();
            next.best_latency_ms = mc.record.latency_ms;
        }
    }
    if best.energy_mj < previous.energy_mj * (1.0 - cfg.min_improvement) {
        next.stale_rounds = 0;
    } else {
        next.stale_rounds += 1;
    }
    next.best_record = Some(best);

    let report = report_of(&next, k_before, snr, evaluated, order.len());
    Ok((next, report))
}

fn finished(state: &SearchState, cfg: &SearchConfig) -> bool {
    state.round >= cfg.max_rounds || state.stale_rounds >= cfg.patience
}

/// Runs rounds until `max_rounds` or `patience` rounds without improvement.
/// `on_report` sees each report as soon as its round completes.
pub fn run_search(
    cfg: &SearchConfig,
    op: &OperatorSpec,
    backend: &dyn Backend,
    dev: &DeviceConfig,
    on_report: &mut dyn FnMut(&RoundReport),
) -> Result<SearchOutcome, SearchError> {
    let (mut state, report) = initial_round(cfg, op, backend, dev)?;
    on_report(&report);
    let mut reports = vec![report];
    while !finished(&state, cfg) {
        let (next, report) = round(&state, cfg, backend, dev)?;
        on_report(&report);
        reports.push(report);
        state = next;
    }
    Ok(SearchOutcome {
        best: state.best.clone(),
        record: state.best_record.clone().expect("energy state has a best record"),
        reports,
        log: state.measured.into_iter().map(|m| m.record).collect(),
    })
}

fn latency_round(
    state: &SearchState,
    cfg: &SearchConfig,
    backend: &dyn Backend,
) -> Result<(SearchState, RoundReport), SearchError> {
    let mut next = state.clone();
    next.round += 1;
    let offspring = reproduce(
        &state.parents,
        cfg.generation_size,
        &cfg.rates,
        &cfg.limits,
        derive_seed(cfg.rng_seed, next.round, "breed"),
    )?;
    let (kept, evaluated) = latency_filter(offspring, cfg.m, backend)?;
    next.parents = kept.iter().take(cfg.m.div_ceil(2)).map(|(c, _)| c.clone()).collect();
    let (fastest, latency) = &kept[0];
    let improved = *latency < state.best_latency_ms * (1.0 - cfg.min_improvement);
    if (*latency, fastest.id) < (state.best_latency_ms, state.best.id) {
        next.best = fastest.clone();
        next.best_latency_ms = *latency;
    }
    next.stale_rounds = if improved { 0 } else { state.stale_rounds + 1 };
    let k = state.controller.k();
    let report = report_of(&next, k, None, evaluated, 0);
    Ok((next, report))
}

/// Baseline: the same loop selecting parents purely by latency. No energy is
/// measured during the rounds; the fastest candidate is measured once at the
/// end.
pub fn run_latency_only(
    cfg: &SearchConfig,
    op: &OperatorSpec,
    backend: &dyn Backend,
    dev: &DeviceConfig,
    on_report: &mut dyn FnMut(&RoundReport),
) -> Result<SearchOutcome, SearchError> {
    let (mut state, report) = start(cfg, op, backend, dev, true)?;
    on_report(&report);
    let mut reports = vec![report];
    while !finished(&state, cfg) {
        let (next, report) = latency_round(&state, cfg, backend)?;
        on_report(&report);
        reports.push(report);
        state = next;
    }
    let record = backend.measure(&state.best)?;
    Ok(SearchOutcome {
        best: state.best,
        record: record.clone(),
        reports,
        log: vec![record],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    EnergyAware,
    LatencyOnly,
}

/// Self-contained record of a search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub artifact_version: u32,
    pub feature_schema: String,
    pub profile_name: String,
    pub profile_version: u32,
    pub backend: String,
    pub mode: SearchMode,
    pub op: OperatorSpec,
    pub config: SearchConfig,
    pub reports: Vec<RoundReport>,
    pub best: Candidate,
    pub best_record: MeasurementRecord,
    pub created_ms: u64,
}

impl RunArtifact {
    pub fn new(
        mode: SearchMode,
        op: OperatorSpec,
        cfg: &SearchConfig,
        dev: &DeviceConfig,
        backend: &dyn Backend,
        outcome: &SearchOutcome,
    ) -> Self {
        RunArtifact {
            artifact_version: ARTIFACT_VERSION,
            feature_schema: FEATURE_SCHEMA.to_string(),
            profile_name: dev.name.clone(),
            profile_version: dev.profile_version,
            backend: backend.tag().to_string(),
            mode,
            op,
            config: cfg.clone(),
            reports: outcome.reports.clone(),
            best: outcome.best.clone(),
            best_record: outcome.record.clone(),
            created_ms: outcome.record.timestamp_ms,
        }
    }

    /// Equality ignoring timestamps.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |a: &RunArtifact| {
            let mut a = a.clone();
            a.created_ms = 0;
            a.best_record.timestamp_ms = 0;
            a
        };
        strip(self) == strip(other)
    }
}
