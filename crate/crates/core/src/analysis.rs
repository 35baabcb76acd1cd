//! Post-processing of simulation output: Lyapunov drift, stability
//! classification, capacity sweeps and the combined verification harness.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{self, CapacityError};
use crate::model::Instance;
use crate::sched::{self, SchedError, SchedulerSpec, TieBreak};
use crate::sim::{self, Purpose, RunOptions, SimError, SlotEvents, TraceStats};

/// Points required in the final half of the series before a verdict.
const MIN_SLOPE_POINTS: usize = 8;

/// Unstable verdicts need this multiple of the slope threshold.
pub const HYSTERESIS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("run was recorded without per-slot drift statistics")]
    NoDriftTrace,
    #[error("expert {0} is not part of the run")]
    Expert(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("topic {0} has arrival mass but q = 0, so L(t) is undefined")]
    UndefinedLyapunov(usize),
    #[error("estimate violates T_hat >= gamma * T at topic {topic}: {t_hat} < {gamma} * {t}")]
    BoundViolated {
        topic: usize,
        t: f64,
        t_hat: f64,
        gamma: f64,
    },
    #[error("estimated research time {t_hat} at topic {topic} is below one slot")]
    EstimateBelowOne { topic: usize, t_hat: f64 },
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("this check needs a single-expert instance, got {0} experts")]
    NotSingleExpert(usize),
    #[error("lambda grid must be non-empty and sorted ascending")]
    Grid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
}

// ---------------------------------------------------------------------------
// Drift

/// Empirical against analytic one-slot drift of `L(t) = sum_x Q_x(t)/q(x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub expert: usize,
    pub lyapunov_series: Vec<(u64, f64)>,
    /// Mean change of `L` over slots in which the expert has work to serve.
    pub empirical_drift: f64,
    pub standard_error: f64,
    pub busy_slots: u64,
    pub idle_slots: u64,
    /// Mean increase over slots in which the expert idles.
    pub idle_mean_increase: f64,
    /// `lambda * sum_x p(x)/q(x) - 1`.
    pub predicted_drift: f64,
    /// `1 - lambda * sum_x p(x)/q(x)`.
    pub delta: f64,
}

impl DriftReport {
    pub fn z_score(&self) -> f64 {
        let diff = (self.empirical_drift - self.predicted_drift).abs();
        if self.standard_error > 0.0 {
            diff / self.standard_error
        } else if diff < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, standard_errors: f64) -> bool {
        self.busy_slots > 1 && self.z_score() <= standard_errors
    }
}

/// Single-expert drift check.
pub fn drift_check(stats: &TraceStats, p: &[f64], q: &[f64], lambda: f64) -> Result<DriftReport, AnalysisError> {
    drift_check_expert(stats, 0, p, q, lambda)
}

/// Drift check for one expert of a run. `lambda * p(x)` must be the rate at
/// which topic-`x` requests join this expert's queues (for routed runs,
/// `p(x) = merged(x) * s[i][x]`).
pub fn drift_check_expert(
    stats: &TraceStats,
    expert: usize,
    p: &[f64],
    q: &[f64],
    lambda: f64,
) -> Result<DriftReport, AnalysisError> {
    let traces = stats.drift.as_ref().ok_or(AnalysisError::NoDriftTrace)?;
    let trace = traces.get(expert).ok_or(AnalysisError::Expert(expert))?;
    if p.len() != q.len() {
        return Err(AnalysisError::Dimension(format!("p has {} topics, q has {}", p.len(), q.len())));
    }
    let mut work = 0.0;
    for (x, (&px, &qx)) in p.iter().zip(q).enumerate() {
        if px > 0.0 {
            if qx == 0.0 {
                return Err(AnalysisError::UndefinedLyapunov(x));
            }
            work += px / qx;
        }
    }
    let delta = 1.0 - lambda * work;
    Ok(DriftReport {
        expert,
        lyapunov_series: trace.lyapunov_series.clone(),
        empirical_drift: trace.busy.mean,
        standard_error: trace.busy.standard_error(),
        busy_slots: trace.busy.count,
        idle_slots: trace.idle.count,
        idle_mean_increase: trace.idle.mean,
        predicted_drift: -delta,
        delta,
    })
}

// ---------------------------------------------------------------------------
// Stability

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// Least-squares slope of total queue against time over the final half.
    pub growth_slope: f64,
    pub final_quarter_mean: f64,
    pub slope_threshold: f64,
}

/// Least-squares slope of `ys` against `xs`.
fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Finite-horizon proxy for stability in the mean. `slope_threshold`
/// defaults to `0.01 * lambda` requests per slot; runs whose slope lies
/// between the threshold and ten times it are inconclusive.
pub fn classify_stability(stats: &TraceStats, lambda: f64, slope_threshold: Option<f64>) -> StabilityVerdict {
    let threshold = slope_threshold.unwrap_or(0.01 * lambda);
    let half = stats.horizon / 2;
    let points: Vec<(f64, f64)> = stats
        .samples
        .iter()
        .filter(|s| s.t >= half)
        .map(|s| (s.t as f64, s.total_queue as f64))
        .collect();
    let final_quarter_mean = stats.final_quarter_mean_total_queue;
    if points.len() < MIN_SLOPE_POINTS {
        return StabilityVerdict {
            verdict: Verdict::Inconclusive,
            growth_slope: f64::NAN,
            final_quarter_mean,
            slope_threshold: threshold,
        };
    }
    let slope = ols_slope(&points);
    let verdict = if slope <= threshold && final_quarter_mean.is_finite() {
        Verdict::Stable
    } else if slope >= HYSTERESIS * threshold {
        Verdict::Unstable
    } else {
        Verdict::Inconclusive
    };
    StabilityVerdict {
        verdict,
        growth_slope: slope,
        final_quarter_mean,
        slope_threshold: threshold,
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub verdict: Verdict,
    pub slope: f64,
    pub final_quarter_mean: f64,
    /// Smallest per-expert fraction of slots spent with empty queues. Not
    /// part of the CSV.
    #[serde(skip)]
    pub empty_fraction: f64,
}

/// Largest load stable on every seed and smallest load unstable on every
/// seed. Either side is `None` when no grid point qualifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub lambda_lo: Option<f64>,
    pub lambda_hi: Option<f64>,
}

impl Bracket {
    /// Whether `value` lies in `[lo - widen, hi + widen]`, treating a missing
    /// side as open.
    pub fn contains(&self, value: f64, widen: f64) -> bool {
        self.lambda_lo.is_none_or(|lo| value >= lo - widen) && self.lambda_hi.is_none_or(|hi| value <= hi + widen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub bracket: Bracket,
}

impl SweepTable {
    /// CSV with columns `lambda,seed,verdict,slope,final_quarter_mean`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn verdicts_at(&self, lambda: f64) -> Vec<Verdict> {
        self.rows.iter().filter(|r| r.lambda == lambda).map(|r| r.verdict).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub horizon: u64,
    pub sample_interval: u64,
    /// Threshold factor applied to each grid load; `None` uses the default.
    pub slope_threshold_factor: Option<f64>,
}

impl SweepOptions {
    pub fn new(horizon: u64) -> Self {
        Self {
            horizon,
            sample_interval: 100,
            slope_threshold_factor: None,
        }
    }
}

/// Runs every `(lambda, seed)` cell in parallel and brackets the capacity.
/// Scheduler certificates do not depend on the load, so they are computed
/// once from `inst`.
pub fn capacity_boundary_sweep(
    inst: &Instance,
    spec: &SchedulerSpec,
    lambdas: &[f64],
    seeds: &[u64],
    opts: SweepOptions,
) -> Result<SweepTable, AnalysisError> {
    if lambdas.is_empty() || lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(AnalysisError::Grid);
    }
    let sched = spec.build(inst)?;
    let cells: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(lambda, seed)| {
            let cell = inst.with_lambda(lambda);
            let run_opts = RunOptions::new(opts.horizon, seed).with_sample_interval(opts.sample_interval);
            let stats = sim::run_with(&cell, &sched, run_opts)?;
            let v = classify_stability(&stats, lambda, opts.slope_threshold_factor.map(|f| f * lambda));
            Ok(SweepRow {
                lambda,
                seed,
                verdict: v.verdict,
                slope: v.growth_slope,
                final_quarter_mean: v.final_quarter_mean,
                empty_fraction: stats.empty_fraction.iter().copied().fold(f64::INFINITY, f64::min),
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let all = |lambda: f64, want: Verdict| rows.iter().filter(|r| r.lambda == lambda).all(|r| r.verdict == want);
    let lambda_lo = lambdas.iter().rev().copied().find(|&l| all(l, Verdict::Stable));
    let lambda_hi = lambdas.iter().copied().find(|&l| all(l, Verdict::Unstable));
    Ok(SweepTable {
        rows,
        bracket: Bracket { lambda_lo, lambda_hi },
    })
}

/// Analytic boundary for `spec` on `inst`, in the per-expert load units of
/// the arrival model.
pub fn analytic_boundary(inst: &Instance, spec: &SchedulerSpec) -> Result<f64, AnalysisError> {
    let n = inst.n();
    match spec.kind {
        sched::SchedulerKind::WorkConserving => {
            Ok(capacity::single_capacity(&inst.arrivals.pmf[0], inst.experts[0].success_prob()).lambda_star)
        }
        sched::SchedulerKind::Loss => {
            let p = &inst.arrivals.pmf[0];
            let q = inst.experts[0].success_prob();
            match &spec.mu {
                // Thinned arrivals `lambda p(x) mu(x)` against the lossless formula.
                Some(mu) => {
                    let thinned: Vec<f64> = p.iter().zip(mu).map(|(a, b)| a * b).collect();
                    Ok(capacity::single_capacity(&thinned, q).lambda_star)
                }
                None => Ok(capacity::loss_capacity(p, q, spec.epsilon.unwrap_or(0.0))?.lambda_star),
            }
        }
        sched::SchedulerKind::Routing => {
            let p = inst.normalized_merged_pmf();
            match &spec.s {
                Some(s) => Ok(capacity::routing_capacity(&p, &inst.experts, s) / n as f64),
                None => Ok(capacity::multi_capacity_dual(&p, &inst.experts)?.per_expert(n)),
            }
        }
        sched::SchedulerKind::Baseline => {
            let p = inst.normalized_merged_pmf();
            let s = sched::baseline_matrix(inst);
            Ok(capacity::routing_capacity(&p, &inst.experts, &s) / n as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Misestimated research times

/// Produces estimates `T_hat` from the true times `T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Misestimation {
    /// `T_hat = T`.
    Exact,
    /// `T_hat = max(1, c * T)`.
    Scale(f64),
    /// `T_hat(x) = max(1, u(x) * T(x))` with `u(x)` uniform on `[gamma, 1]`.
    UniformShrink { seed: u64 },
    /// Caller-supplied estimates, used as-is.
    Explicit(Vec<f64>),
}

impl Misestimation {
    /// Generates and certifies `T_hat >= gamma * T`.
    pub fn estimate(&self, t: &[f64], gamma: f64) -> Result<Vec<f64>, AnalysisError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(AnalysisError::Gamma(gamma));
        }
        let t_hat = match self {
            Misestimation::Exact => t.to_vec(),
            Misestimation::Scale(c) => t.iter().map(|&tx| (c * tx).max(1.0)).collect(),
            Misestimation::UniformShrink { seed } => {
                let mut rng = sim::stream(*seed, Purpose::Geometric, usize::MAX >> 40, 0);
                t.iter()
                    .map(|&tx| {
                        let u = if gamma < 1.0 { rng.random_range(gamma..=1.0) } else { 1.0 };
                        (u * tx).max(1.0)
                    })
                    .collect()
            }
            Misestimation::Explicit(v) => v.clone(),
        };
        certify_estimate(t, &t_hat, gamma)?;
        Ok(t_hat)
    }
}

/// Rejects estimates that break `T_hat(x) >= gamma * T(x)` or fall below one
/// slot.
pub fn certify_estimate(t: &[f64], t_hat: &[f64], gamma: f64) -> Result<(), AnalysisError> {
    if t.len() != t_hat.len() {
        return Err(AnalysisError::Dimension(format!(
            "{} estimates for {} topics",
            t_hat.len(),
            t.len()
        )));
    }
    for (topic, (&tx, &hx)) in t.iter().zip(t_hat).enumerate() {
        if hx.is_nan() || hx < 1.0 {
            return Err(AnalysisError::EstimateBelowOne { topic, t_hat: hx });
        }
        let ok = if tx.is_infinite() { hx.is_infinite() } else { hx >= gamma * tx * (1.0 - 1e-12) };
        if !ok {
            return Err(AnalysisError::BoundViolated {
                topic,
                t: tx,
                t_hat: hx,
                gamma,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Corollary1Run {
    pub seed: u64,
    pub verdict: StabilityVerdict,
    pub empty_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Corollary1Report {
    pub gamma: f64,
    pub t_hat: Vec<Option<f64>>,
    /// Lossless capacity computed from the estimates.
    pub estimated_lambda_star: f64,
    pub true_lambda_star: f64,
    /// `gamma * estimated_lambda_star`.
    pub guaranteed_load: f64,
    pub run_lambda: f64,
    pub runs: Vec<Corollary1Run>,
    pub all_stable: bool,
}

/// Simulates a work-conserving expert with its true success probabilities
/// at `0.95 * gamma * lambda_hat*`, where `lambda_hat*` comes from the
/// estimated times.
pub fn corollary1_check(
    inst: &Instance,
    gamma: f64,
    misestimation: &Misestimation,
    seeds: &[u64],
    horizon: u64,
) -> Result<Corollary1Report, AnalysisError> {
    if inst.n() != 1 {
        return Err(AnalysisError::NotSingleExpert(inst.n()));
    }
    let expert = &inst.experts[0];
    let t_hat = misestimation.estimate(expert.mean_time(), gamma)?;
    let q_hat: Vec<f64> = t_hat.iter().map(|&t| if t.is_infinite() { 0.0 } else { 1.0 / t }).collect();
    let p = &inst.arrivals.pmf[0];
    let estimated_lambda_star = capacity::single_capacity(p, &q_hat).lambda_star;
    let guaranteed_load = capacity::degraded_capacity(p, &q_hat, gamma)?;
    let true_lambda_star = capacity::single_capacity(p, expert.success_prob()).lambda_star;
    let run_lambda = 0.95 * guaranteed_load;

    let cell = inst.with_lambda(run_lambda);
    let sched = sched::work_conserving_single(&cell, TieBreak::default())?;
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let stats = sim::run_with(&cell, &sched, RunOptions::new(horizon, seed))?;
            Ok(Corollary1Run {
                seed,
                verdict: classify_stability(&stats, run_lambda, None),
                empty_fraction: stats.empty_fraction[0],
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let all_stable = runs.iter().all(|r| r.verdict.verdict == Verdict::Stable);
    Ok(Corollary1Report {
        gamma,
        t_hat: t_hat.iter().map(|&t| t.is_finite().then_some(t)).collect(),
        estimated_lambda_star,
        true_lambda_star,
        guaranteed_load,
        run_lambda,
        runs,
        all_stable,
    })
}

// ---------------------------------------------------------------------------
// Routing and work-conservation checks

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingFrequencyReport {
    /// `observed[i][x]`: fraction of topic-`x` requests sent to expert `i`.
    pub observed: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
    pub arrivals_per_topic: Vec<u64>,
    pub max_z: f64,
    pub passed: bool,
}

/// Compares empirical routing fractions with `s` using binomial standard
/// errors. Deterministic entries (0 or 1) must match exactly.
pub fn routing_frequency_check(stats: &TraceStats, s: &[Vec<f64>], sigmas: f64) -> RoutingFrequencyReport {
    let counts = &stats.final_state.cum_arrivals;
    let n = counts.len();
    let topics = counts.first().map_or(0, Vec::len);
    let shape_ok = s.len() == n && s.iter().all(|r| r.len() == topics);
    let arrivals_per_topic: Vec<u64> = (0..topics).map(|x| (0..n).map(|i| counts[i][x]).sum()).collect();
    let mut observed = vec![vec![0.0; topics]; n];
    let mut max_z: f64 = 0.0;
    for x in 0..topics {
        let total = arrivals_per_topic[x];
        if total == 0 {
            continue;
        }
        for i in 0..n {
            let frac = counts[i][x] as f64 / total as f64;
            observed[i][x] = frac;
            if !shape_ok {
                continue;
            }
            let e = s[i][x];
            let sd = (e * (1.0 - e) / total as f64).max(0.0).sqrt();
            let diff = (frac - e).abs();
            let z = if sd > 0.0 {
                diff / sd
            } else if diff < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
    }
    RoutingFrequencyReport {
        observed,
        expected: s.to_vec(),
        arrivals_per_topic,
        max_z: if shape_ok { max_z } else { f64::INFINITY },
        passed: shape_ok && max_z <= sigmas,
    }
}

/// Every expert is idle exactly when its own queues are empty at selection
/// time.
pub fn check_work_conservation(ev: &SlotEvents) -> Result<(), String> {
    for (i, (a, &queued)) in ev.assignments.iter().zip(&ev.queued_at_selection).enumerate() {
        match (a, queued) {
            (None, q) if q > 0 => return Err(format!("expert {i} idle with {q} queued requests")),
            (Some(x), 0) => return Err(format!("expert {i} assigned topic {x} from empty queues")),
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Verification harness

fn default_resolution() -> f64 {
    1e-3
}
fn default_horizon() -> u64 {
    200_000
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_gamma() -> f64 {
    0.5
}
fn default_geometric_trials() -> u64 {
    1_000_000
}
fn default_geometric_q() -> Vec<f64> {
    vec![1.0, 0.5, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub instance: Instance,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_geometric_trials")]
    pub geometric_trials: u64,
    #[serde(default = "default_geometric_q")]
    pub geometric_q: Vec<f64>,
    /// Claimed routing certificate; defaults to the dual LP solution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<Vec<f64>>>,
}

impl VerifyConfig {
    pub fn new(instance: Instance) -> Self {
        Self {
            instance,
            resolution: default_resolution(),
            seed: 0,
            horizon: default_horizon(),
            seeds: default_seeds(),
            gamma: default_gamma(),
            geometric_trials: default_geometric_trials(),
            geometric_q: default_geometric_q(),
            s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

fn check(name: &str, passed: bool, detail: serde_json::Value) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn failed(name: &str, err: impl std::fmt::Display) -> CheckResult {
    check(name, false, serde_json::json!({ "error": err.to_string() }))
}

/// Runs the duality, drift, geometric-service, misestimation and routing
/// checks that apply to the instance. Errors inside a check mark it failed;
/// only an invalid instance is an error.
pub fn run_verification(cfg: &VerifyConfig) -> Result<VerificationReport, AnalysisError> {
    let inst = &cfg.instance;
    let violations = inst.validate();
    if !violations.is_empty() {
        return Err(SimError::InvalidInstance(violations).into());
    }
    let n = inst.n();
    let p_norm = inst.normalized_merged_pmf();
    let mut checks = Vec::new();

    if n <= 3 {
        checks.push(match duality_check(&p_norm, inst, cfg.resolution) {
            Ok(c) => c,
            Err(e) => failed("duality_gap", e),
        });
    }

    checks.push(match drift_verification(inst, cfg) {
        Ok(c) => c,
        Err(e) => failed("drift", e),
    });

    let mut geo = Vec::new();
    let mut geo_ok = true;
    for (k, &q) in cfg.geometric_q.iter().enumerate() {
        if !(q > 0.0 && q <= 1.0) {
            geo_ok = false;
            continue;
        }
        let mut rng = sim::stream(cfg.seed, Purpose::Geometric, k, 0);
        let g = sim::geometric_service_check(q, cfg.geometric_trials, &mut rng);
        geo_ok &= g.within(4.0);
        geo.push(g);
    }
    checks.push(check("geometric_service", geo_ok, serde_json::json!(geo)));

    if n == 1 {
        let mis = Misestimation::UniformShrink { seed: cfg.seed };
        checks.push(match corollary1_check(inst, cfg.gamma, &mis, &cfg.seeds, cfg.horizon) {
            Ok(r) => {
                let ok = r.all_stable;
                check("corollary1", ok, serde_json::json!(r))
            }
            Err(e) => failed("corollary1", e),
        });
    } else {
        checks.push(match routing_verification(inst, cfg) {
            Ok(c) => c,
            Err(e) => failed("routing_frequency", e),
        });
        if let Some(claimed) = &cfg.s {
            checks.push(match certificate_check(inst, claimed) {
                Ok(c) => c,
                Err(e) => failed("routing_certificate", e),
            });
        }
    }

    let all_passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport { checks, all_passed })
}

fn duality_check(p: &[f64], inst: &Instance, resolution: f64) -> Result<CheckResult, AnalysisError> {
    let primal = capacity::multi_capacity_primal_strict(p, &inst.experts, resolution)?;
    let dual = capacity::multi_capacity_dual(p, &inst.experts)?;
    let gap = (primal.lambda_star - dual.lambda_star).abs();
    let tolerance = 10.0 * resolution * dual.lambda_star;
    Ok(check(
        "duality_gap",
        gap <= tolerance,
        serde_json::json!({
            "primal_lambda_star": primal.lambda_star,
            "dual_lambda_star": dual.lambda_star,
            "gap": gap,
            "tolerance": tolerance,
        }),
    ))
}

fn drift_verification(inst: &Instance, cfg: &VerifyConfig) -> Result<CheckResult, AnalysisError> {
    let opts = RunOptions::new(cfg.horizon, cfg.seed).with_drift();
    let lambda = inst.lambda();
    if inst.n() == 1 {
        let sched = sched::work_conserving_single(inst, TieBreak::default())?;
        let stats = sim::run_with(inst, &sched, opts)?;
        let mut report = drift_check(&stats, &inst.arrivals.pmf[0], inst.experts[0].success_prob(), lambda)?;
        report.lyapunov_series.clear();
        let ok = report.within(4.0);
        return Ok(check("drift", ok, serde_json::json!([report])));
    }
    let p = inst.normalized_merged_pmf();
    let dual = capacity::multi_capacity_dual(&p, &inst.experts)?;
    let s = &dual.routing_policy().expect("dual returns routing").s;
    let sched = sched::routing_from_matrix(inst, s, TieBreak::default())?;
    let stats = sim::run_with(inst, &sched, opts)?;
    let merged = inst.merged_pmf();
    let mut reports = Vec::new();
    let mut ok = true;
    for (i, e) in inst.experts.iter().enumerate() {
        let rates: Vec<f64> = merged.iter().zip(&s[i]).map(|(m, sx)| m * sx).collect();
        let mut r = drift_check_expert(&stats, i, &rates, e.success_prob(), lambda)?;
        r.lyapunov_series.clear();
        ok &= r.within(4.0);
        reports.push(r);
    }
    Ok(check("drift", ok, serde_json::json!(reports)))
}

/// A claimed routing matrix must be valid and achieve the dual optimum.
fn certificate_check(inst: &Instance, s: &[Vec<f64>]) -> Result<CheckResult, AnalysisError> {
    let p = inst.normalized_merged_pmf();
    let dual = capacity::multi_capacity_dual(&p, &inst.experts)?;
    if s.len() != inst.n() || s.iter().any(|r| r.len() != inst.topics) {
        return Ok(failed("routing_certificate", "routing matrix has the wrong shape"));
    }
    if let Err(e) = capacity::validate_routing(s, &inst.experts) {
        return Ok(failed("routing_certificate", e));
    }
    let achieved = capacity::routing_capacity(&p, &inst.experts, s);
    Ok(check(
        "routing_certificate",
        achieved >= dual.lambda_star * (1.0 - 1e-6),
        serde_json::json!({ "achieved_lambda_star": achieved, "dual_lambda_star": dual.lambda_star }),
    ))
}

fn routing_verification(inst: &Instance, cfg: &VerifyConfig) -> Result<CheckResult, AnalysisError> {
    let p = inst.normalized_merged_pmf();
    let dual = capacity::multi_capacity_dual(&p, &inst.experts)?;
    let s = dual.routing_policy().expect("dual returns routing").s.clone();
    let sched = sched::routing_from_matrix(inst, &s, TieBreak::default())?;
    let stats = sim::run_with(inst, &sched, RunOptions::new(cfg.horizon, cfg.seed))?;
    let reference = cfg.s.clone().unwrap_or(s);
    let report = routing_frequency_check(&stats, &reference, 4.0);
    let ok = report.passed;
    Ok(check("routing_frequency", ok, serde_json::json!(report)))
}
