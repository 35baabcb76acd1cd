//! Analytic capacities.
//!
//! * [`single_capacity`]: one expert, `lambda* = (sum_x p(x)/q(x))^-1`.
//! * [`loss_capacity`]: one expert that may reject a fraction of arrivals,
//!   bounded by a loss budget `epsilon`.
//! * [`degraded_capacity`]: guaranteed load when research times are only
//!   known up to a factor `gamma`.
//! * [`multi_capacity_primal`] / [`multi_capacity_dual`]: coordinating
//!   experts, as a max-min over expert weights and as its dual routing LP.
//!
//! Multi-expert capacities are in the units of the p.m.f. passed in. With
//! [`Instance::normalized_merged_pmf`](crate::model::Instance::normalized_merged_pmf)
//! that is total system load; the per-expert `lambda` of the arrival model is
//! that value divided by `n` (see [`CapacityResult::per_expert`]).

use serde::Serialize;
use thiserror::Error;

use crate::lp::{solve_lp, LinearProgram, LpError, LpStatus};
use crate::model::ExpertProfile;

const BISECTION_STEPS: usize = 200;
const MAX_SIMPLEX_POINTS: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("topic {topic} carries arrival mass but no expert can answer it")]
    UnanswerableTopic { topic: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("epsilon must be finite and >= 0, got {0}")]
    Epsilon(f64),
    #[error("grid resolution {0} is not usable")]
    Resolution(f64),
    #[error("alpha grid of {0} points is too large; use a coarser resolution")]
    GridTooLarge(u64),
    #[error("linear program ended with status {0:?}")]
    Solver(LpStatus),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Admission probabilities `mu(x)` and the loss budget they were built for.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPolicy {
    pub mu: Vec<f64>,
    pub epsilon: f64,
}

impl LossPolicy {
    pub fn admit_all(topics: usize) -> Self {
        Self {
            mu: vec![1.0; topics],
            epsilon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (x, &m) in self.mu.iter().enumerate() {
            if !(0.0..=1.0).contains(&m) {
                return Err(format!("mu({x}) = {m} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Routing p.m.f.s `s[i][x]` over experts for each topic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingPolicy {
    pub s: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    pub dual_mu: f64,
}

/// Column-sum tolerance for routing p.m.f.s.
pub const ROUTING_TOLERANCE: f64 = 1e-7;

impl RoutingPolicy {
    /// Checks that every answerable topic has a p.m.f. over experts that puts
    /// no mass on experts who cannot answer it. Topics no expert can answer
    /// must have an all-zero column.
    pub fn validate(&self, experts: &[ExpertProfile]) -> Result<(), String> {
        validate_routing(&self.s, experts)
    }
}

pub fn validate_routing(s: &[Vec<f64>], experts: &[ExpertProfile]) -> Result<(), String> {
    if s.len() != experts.len() {
        return Err(format!("s has {} rows for {} experts", s.len(), experts.len()));
    }
    let topics = experts.first().map_or(0, ExpertProfile::topics);
    for (i, row) in s.iter().enumerate() {
        if row.len() != topics {
            return Err(format!("s row {i} has {} entries, expected {topics}", row.len()));
        }
    }
    for x in 0..topics {
        let answerable = experts.iter().any(|e| e.answers(x));
        let mut sum = 0.0;
        for (i, e) in experts.iter().enumerate() {
            let v = s[i][x];
            if !v.is_finite() || v < 0.0 {
                return Err(format!("s[{i}][{x}] = {v} is not a probability"));
            }
            if v > 0.0 && !e.answers(x) {
                return Err(format!("s[{i}][{x}] = {v} routes to an expert with q = 0"));
            }
            sum += v;
        }
        if answerable && (sum - 1.0).abs() > ROUTING_TOLERANCE {
            return Err(format!("routing column for topic {x} sums to {sum}, expected 1"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    None,
    Loss(LossPolicy),
    Routing(RoutingPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityResult {
    pub lambda_star: f64,
    pub certificate: Certificate,
}

impl CapacityResult {
    fn bare(lambda_star: f64) -> Self {
        Self {
            lambda_star,
            certificate: Certificate::None,
        }
    }

    pub fn loss_policy(&self) -> Option<&LossPolicy> {
        match &self.certificate {
            Certificate::Loss(p) => Some(p),
            _ => None,
        }
    }

    pub fn routing_policy(&self) -> Option<&RoutingPolicy> {
        match &self.certificate {
            Certificate::Routing(p) => Some(p),
            _ => None,
        }
    }

    /// Converts a system-load capacity into the per-expert arrival load.
    pub fn per_expert(&self, n: usize) -> f64 {
        self.lambda_star / n as f64
    }
}

/// Closed-form capacity of one expert. Zero when some topic with arrival mass
/// cannot be answered.
pub fn single_capacity(p: &[f64], q: &[f64]) -> CapacityResult {
    CapacityResult::bare(single_capacity_value(p, q))
}

fn single_capacity_value(p: &[f64], q: &[f64]) -> f64 {
    let mut work = 0.0;
    for (&px, &qx) in p.iter().zip(q) {
        if px > 0.0 {
            if qx == 0.0 {
                return 0.0;
            }
            work += px / qx;
        }
    }
    if work == 0.0 {
        f64::INFINITY
    } else {
        1.0 / work
    }
}

/// Largest load sustainable by one expert that drops topic-`x` arrivals with
/// probability `1 - mu(x)`, keeping the long-run loss rate within `epsilon`.
///
/// Bisects on `lambda`; each probe solves the LP
/// `min sum_x mu(x) p(x)/q(x)` s.t. `lambda * sum_x (1 - mu(x)) p(x) <= epsilon`,
/// `0 <= mu <= 1` and `mu(x) = 0` where `q(x) = 0`, and accepts `lambda` when
/// the optimum is at most `1 / lambda`.
pub fn loss_capacity(p: &[f64], q: &[f64], epsilon: f64) -> Result<CapacityResult, CapacityError> {
    if p.len() != q.len() {
        return Err(CapacityError::Dimension(format!(
            "p has {} topics, q has {}",
            p.len(),
            q.len()
        )));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(CapacityError::Epsilon(epsilon));
    }
    let topics = p.len();

    // Without a loss budget every arriving request must be kept.
    if epsilon == 0.0 {
        let lambda_star = single_capacity_value(p, q);
        let mu = q.iter().map(|&qx| if qx > 0.0 { 1.0 } else { 0.0 }).collect();
        return Ok(CapacityResult {
            lambda_star,
            certificate: Certificate::Loss(LossPolicy { mu, epsilon }),
        });
    }

    let total: f64 = p.iter().sum();
    let probe = |lambda: f64| -> Result<Option<Vec<f64>>, CapacityError> {
        let objective: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(&px, &qx)| if qx > 0.0 { px / qx } else { 0.0 })
            .collect();
        let neg_p: Vec<f64> = p.iter().map(|&px| -px).collect();
        let mut lp = LinearProgram::minimize(objective).le(neg_p, epsilon / lambda - total);
        for x in 0..topics {
            let hi = if q[x] > 0.0 { 1.0 } else { 0.0 };
            lp = lp.bound(x, 0.0, hi);
        }
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Infeasible => Ok(None),
            LpStatus::Unbounded => Err(CapacityError::Solver(LpStatus::Unbounded)),
            LpStatus::Optimal => {
                if lambda * sol.objective_value <= 1.0 + 1e-12 {
                    Ok(Some(sol.x))
                } else {
                    Ok(None)
                }
            }
        }
    };

    // Since p/q >= p, any feasible load has lambda * total <= 1 + epsilon.
    let mut hi = (1.0 + epsilon) / total;
    if let Some(mu) = probe(hi)? {
        return Ok(loss_result(hi, mu, epsilon));
    }
    let mut lo = 0.0;
    let mut best_mu = vec![0.0; topics];
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match probe(mid)? {
            Some(mu) => {
                lo = mid;
                best_mu = mu;
            }
            None => hi = mid,
        }
    }
    Ok(loss_result(lo, best_mu, epsilon))
}

fn loss_result(lambda_star: f64, mu: Vec<f64>, epsilon: f64) -> CapacityResult {
    let mu = mu.into_iter().map(|m| m.clamp(0.0, 1.0)).collect();
    CapacityResult {
        lambda_star,
        certificate: Certificate::Loss(LossPolicy { mu, epsilon }),
    }
}

/// Load guaranteed stable when the true times satisfy `T(x) <= T_hat(x) / gamma`:
/// `gamma * single_capacity(p, q_hat)`.
pub fn degraded_capacity(p: &[f64], q_hat: &[f64], gamma: f64) -> Result<f64, CapacityError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CapacityError::Gamma(gamma));
    }
    Ok(gamma * single_capacity_value(p, q_hat))
}

fn check_multi(p: &[f64], experts: &[ExpertProfile]) -> Result<(), CapacityError> {
    if experts.is_empty() {
        return Err(CapacityError::Dimension("no experts".into()));
    }
    for e in experts {
        if e.topics() != p.len() {
            return Err(CapacityError::Dimension(format!(
                "expert {} has {} topics, p has {}",
                e.expert_id,
                e.topics(),
                p.len()
            )));
        }
    }
    Ok(())
}

fn unanswerable_mass_topic(p: &[f64], experts: &[ExpertProfile]) -> Option<usize> {
    (0..p.len()).find(|&x| p[x] > 0.0 && !experts.iter().any(|e| e.answers(x)))
}

/// `sum_x min_{i: q_i(x) > 0} alpha_i p(x) / q_i(x)`.
fn primal_objective(alpha: &[f64], ratios: &[Vec<Option<f64>>]) -> f64 {
    ratios
        .iter()
        .map(|row| {
            row.iter()
                .zip(alpha)
                .filter_map(|(r, a)| r.map(|r| a * r))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Max-min capacity over expert weights, by exhaustive search over the
/// `alpha` simplex at the given resolution. A topic with arrival mass that no
/// expert can answer yields `lambda* = 0`.
pub fn multi_capacity_primal(
    p: &[f64],
    experts: &[ExpertProfile],
    resolution: f64,
) -> Result<CapacityResult, CapacityError> {
    primal(p, experts, resolution, false)
}

/// Like [`multi_capacity_primal`] but an unanswerable mass-bearing topic is
/// an error.
pub fn multi_capacity_primal_strict(
    p: &[f64],
    experts: &[ExpertProfile],
    resolution: f64,
) -> Result<CapacityResult, CapacityError> {
    primal(p, experts, resolution, true)
}

fn primal(
    p: &[f64],
    experts: &[ExpertProfile],
    resolution: f64,
    strict: bool,
) -> Result<CapacityResult, CapacityError> {
    check_multi(p, experts)?;
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(CapacityError::Resolution(resolution));
    }
    if let Some(topic) = unanswerable_mass_topic(p, experts) {
        if strict {
            return Err(CapacityError::UnanswerableTopic { topic });
        }
        return Ok(CapacityResult::bare(0.0));
    }
    let n = experts.len();
    let steps = (1.0 / resolution).round() as u64;
    if steps == 0 {
        return Err(CapacityError::Resolution(resolution));
    }
    let points = simplex_points(steps, n);
    if points > MAX_SIMPLEX_POINTS {
        return Err(CapacityError::GridTooLarge(points));
    }

    // ratios[x][i] = p(x)/q_i(x), None when expert i cannot answer x.
    let ratios: Vec<Vec<Option<f64>>> = (0..p.len())
        .filter(|&x| p[x] > 0.0)
        .map(|x| {
            experts
                .iter()
                .map(|e| {
                    let q = e.success_prob()[x];
                    (q > 0.0).then(|| p[x] / q)
                })
                .collect()
        })
        .collect();

    let mut counts = vec![0u64; n];
    let mut alpha = vec![0.0; n];
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    enumerate_simplex(steps, 0, &mut counts, &mut |counts| {
        for (a, &c) in alpha.iter_mut().zip(counts) {
            *a = c as f64 / steps as f64;
        }
        let value = primal_objective(&alpha, &ratios);
        if value > best.0 {
            best = (value, alpha.clone());
        }
    });

    let (value, alpha) = best;
    let lambda_star = if value > 0.0 { 1.0 / value } else { f64::INFINITY };
    Ok(CapacityResult {
        lambda_star,
        certificate: Certificate::Routing(RoutingPolicy {
            s: Vec::new(),
            alpha: Some(alpha),
            dual_mu: value,
        }),
    })
}

/// Number of compositions of `steps` into `parts` non-negative integers.
fn simplex_points(steps: u64, parts: usize) -> u64 {
    let k = parts.saturating_sub(1) as u64;
    let mut acc: u64 = 1;
    for j in 1..=k {
        acc = match acc.checked_mul(steps + j) {
            Some(v) => v / j,
            None => return u64::MAX,
        };
    }
    acc
}

fn enumerate_simplex(remaining: u64, idx: usize, counts: &mut [u64], visit: &mut impl FnMut(&[u64])) {
    if idx + 1 == counts.len() {
        counts[idx] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        enumerate_simplex(remaining - c, idx + 1, counts, visit);
    }
}

/// Dual routing LP: minimize `mu` subject to
/// `sum_x p(x)/q_i(x) s[i][x] <= mu` for every expert, `sum_i s[i][x] = 1` for
/// every answerable topic and `s >= 0`. Pairs with `q_i(x) = 0` get no
/// variable. Returns `lambda* = 1/mu*` and the routing matrix.
pub fn multi_capacity_dual(
    p: &[f64],
    experts: &[ExpertProfile],
) -> Result<CapacityResult, CapacityError> {
    check_multi(p, experts)?;
    if let Some(topic) = unanswerable_mass_topic(p, experts) {
        return Err(CapacityError::UnanswerableTopic { topic });
    }
    let n = experts.len();
    let topics = p.len();

    // Variable 0 is mu; the rest are the admissible (i, x) pairs.
    let mut pairs = Vec::new();
    for (i, e) in experts.iter().enumerate() {
        for x in 0..topics {
            if e.answers(x) {
                pairs.push((i, x));
            }
        }
    }
    let vars = 1 + pairs.len();
    let mut objective = vec![0.0; vars];
    objective[0] = 1.0;
    let mut lp = LinearProgram::minimize(objective);
    for i in 0..n {
        let mut row = vec![0.0; vars];
        row[0] = -1.0;
        for (k, &(pi, x)) in pairs.iter().enumerate() {
            if pi == i {
                row[k + 1] = p[x] / experts[i].success_prob()[x];
            }
        }
        lp = lp.le(row, 0.0);
    }
    for x in 0..topics {
        let mut row = vec![0.0; vars];
        let mut any = false;
        for (k, &(_, px)) in pairs.iter().enumerate() {
            if px == x {
                row[k + 1] = 1.0;
                any = true;
            }
        }
        if any {
            lp = lp.eq(row, 1.0);
        }
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(CapacityError::Solver(sol.status));
    }

    let mut s = vec![vec![0.0; topics]; n];
    for (k, &(i, x)) in pairs.iter().enumerate() {
        let v = sol.x[k + 1];
        s[i][x] = if v < 1e-12 { 0.0 } else { v };
    }
    for x in 0..topics {
        let sum: f64 = (0..n).map(|i| s[i][x]).sum();
        if sum > 0.0 {
            for row in s.iter_mut() {
                row[x] /= sum;
            }
        }
    }
    // Report the bottleneck load of the cleaned matrix.
    let dual_mu = routing_loads(p, experts, &s)
        .into_iter()
        .fold(0.0, f64::max);
    let lambda_star = if dual_mu > 0.0 { 1.0 / dual_mu } else { f64::INFINITY };
    Ok(CapacityResult {
        lambda_star,
        certificate: Certificate::Routing(RoutingPolicy {
            s,
            alpha: None,
            dual_mu,
        }),
    })
}

/// Per-expert work `sum_x p(x) s[i][x] / q_i(x)` under routing `s`.
pub fn routing_loads(p: &[f64], experts: &[ExpertProfile], s: &[Vec<f64>]) -> Vec<f64> {
    experts
        .iter()
        .zip(s)
        .map(|(e, row)| {
            row.iter()
                .zip(e.success_prob())
                .zip(p)
                .map(|((&sx, &q), &px)| {
                    if sx == 0.0 || px == 0.0 {
                        0.0
                    } else if q == 0.0 {
                        f64::INFINITY
                    } else {
                        px * sx / q
                    }
                })
                .sum()
        })
        .collect()
}

/// Capacity achieved by a fixed routing matrix: the inverse of its
/// bottleneck load.
pub fn routing_capacity(p: &[f64], experts: &[ExpertProfile], s: &[Vec<f64>]) -> f64 {
    let worst = routing_loads(p, experts, s).into_iter().fold(0.0, f64::max);
    if worst == 0.0 {
        f64::INFINITY
    } else {
        1.0 / worst
    }
}

/// `|primal lambda* - dual lambda*|`.
pub fn duality_gap(
    p: &[f64],
    experts: &[ExpertProfile],
    resolution: f64,
) -> Result<f64, CapacityError> {
    let primal = multi_capacity_primal_strict(p, experts, resolution)?;
    let dual = multi_capacity_dual(p, experts)?;
    Ok((primal.lambda_star - dual.lambda_star).abs())
}
