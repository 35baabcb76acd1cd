//! Offline schedulers as admission, routing and per-expert selection rules.
//!
//! A [`Scheduler`] is an immutable policy table. All randomness comes from
//! the caller's streams, so a scheduler can be shared between concurrent
//! runs.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::{self, CapacityError, LossPolicy, RoutingPolicy};
use crate::model::Instance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("{kind} scheduler needs a single-expert instance, got {n} experts")]
    SingleExpertOnly { kind: &'static str, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid admission policy: {0}")]
    Admission(String),
    #[error("invalid routing matrix: {0}")]
    Routing(String),
    #[error("missing certificate: {0}")]
    MissingCertificate(String),
}

/// How an expert picks among its queued requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Lowest-index nonempty topic.
    Arbitrary,
    /// Uniform over queued requests, so longer topic queues are
    /// proportionally likelier.
    #[default]
    UniformRandom,
    /// Uniform over nonempty topic queues.
    UniformTopic,
    /// Longest topic queue, lowest index on ties.
    LongestQueue,
}

impl TieBreak {
    pub const ALL: [TieBreak; 4] = [
        TieBreak::Arbitrary,
        TieBreak::UniformRandom,
        TieBreak::UniformTopic,
        TieBreak::LongestQueue,
    ];

    /// Picks a topic with a nonempty queue, or `None` when all are empty.
    pub fn select<R: Rng + ?Sized>(self, queues: &[u64], rng: &mut R) -> Option<usize> {
        let total: u64 = queues.iter().sum();
        if total == 0 {
            return None;
        }
        match self {
            TieBreak::Arbitrary => queues.iter().position(|&q| q > 0),
            TieBreak::LongestQueue => {
                let mut best = 0;
                for (x, &q) in queues.iter().enumerate() {
                    if q > queues[best] {
                        best = x;
                    }
                }
                Some(best)
            }
            TieBreak::UniformRandom => {
                let mut k = rng.random_range(0..total);
                for (x, &q) in queues.iter().enumerate() {
                    if k < q {
                        return Some(x);
                    }
                    k -= q;
                }
                unreachable!("draw below total queue length")
            }
            TieBreak::UniformTopic => {
                let nonempty = queues.iter().filter(|&&q| q > 0).count();
                let k = rng.random_range(0..nonempty);
                queues
                    .iter()
                    .enumerate()
                    .filter(|(_, &q)| q > 0)
                    .nth(k)
                    .map(|(x, _)| x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Admission {
    All,
    /// Keep a topic-`x` arrival with probability `mu[x]`.
    Bernoulli(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
enum Routing {
    /// Requests stay at the expert where they arrived.
    Local,
    /// Destination drawn from `s[.][x]`; `cdf[x]` is the running sum over
    /// experts.
    Random { cdf: Vec<Vec<f64>> },
    /// Deterministic destination per topic; `None` means unroutable.
    Fixed(Vec<Option<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    WorkConserving,
    Loss,
    Routing,
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    kind: SchedulerKind,
    experts: usize,
    topics: usize,
    admission: Admission,
    routing: Routing,
    selection: TieBreak,
}

impl Scheduler {
    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn selection(&self) -> TieBreak {
        self.selection
    }

    /// Admission decision for an arrival of `topic`. Draws from `rng` only
    /// for randomized admission.
    pub fn admit<R: Rng + ?Sized>(&self, topic: usize, rng: &mut R) -> bool {
        match &self.admission {
            Admission::All => true,
            Admission::Bernoulli(mu) => rng.random::<f64>() < mu[topic],
        }
    }

    /// Destination queue for an admitted arrival of `topic` at `source`;
    /// `None` if no expert can take it.
    pub fn route<R: Rng + ?Sized>(&self, topic: usize, source: usize, rng: &mut R) -> Option<usize> {
        match &self.routing {
            Routing::Local => Some(source),
            Routing::Fixed(dest) => dest[topic],
            Routing::Random { cdf } => {
                let col = &cdf[topic];
                if col.last().copied().unwrap_or(0.0) <= 0.0 {
                    return None;
                }
                let u = rng.random::<f64>() * col[col.len() - 1];
                // Skip zero-probability experts so they are never chosen.
                let mut prev = 0.0;
                let mut last_positive = None;
                for (i, &c) in col.iter().enumerate() {
                    if c > prev {
                        last_positive = Some(i);
                        if u < c {
                            return Some(i);
                        }
                    }
                    prev = c;
                }
                last_positive
            }
        }
    }

    /// Topic the expert serves this slot given its own queue lengths.
    pub fn select<R: Rng + ?Sized>(&self, queues: &[u64], rng: &mut R) -> Option<usize> {
        self.selection.select(queues, rng)
    }

    /// Checks that the scheduler's tables match `inst`.
    pub fn check_compatible(&self, inst: &Instance) -> Result<(), SchedError> {
        if inst.topics != self.topics || inst.n() != self.experts {
            return Err(SchedError::Dimension(format!(
                "scheduler built for {} experts x {} topics, instance has {} x {}",
                self.experts,
                self.topics,
                inst.n(),
                inst.topics
            )));
        }
        Ok(())
    }
}

/// Admits everything and serves any nonempty queue. Single expert only.
pub fn work_conserving_single(inst: &Instance, tie_break: TieBreak) -> Result<Scheduler, SchedError> {
    if inst.n() != 1 {
        return Err(SchedError::SingleExpertOnly {
            kind: "work-conserving",
            n: inst.n(),
        });
    }
    Ok(Scheduler {
        kind: SchedulerKind::WorkConserving,
        experts: 1,
        topics: inst.topics,
        admission: Admission::All,
        routing: Routing::Local,
        selection: tie_break,
    })
}

/// Drops each topic-`x` arrival independently with probability `1 - mu(x)`.
pub fn offline_loss_scheduler(
    inst: &Instance,
    policy: &LossPolicy,
    tie_break: TieBreak,
) -> Result<Scheduler, SchedError> {
    if inst.n() != 1 {
        return Err(SchedError::SingleExpertOnly {
            kind: "loss",
            n: inst.n(),
        });
    }
    if policy.mu.len() != inst.topics {
        return Err(SchedError::Dimension(format!(
            "mu has {} entries, instance has {} topics",
            policy.mu.len(),
            inst.topics
        )));
    }
    policy.validate().map_err(SchedError::Admission)?;
    Ok(Scheduler {
        kind: SchedulerKind::Loss,
        experts: 1,
        topics: inst.topics,
        admission: Admission::Bernoulli(policy.mu.clone()),
        routing: Routing::Local,
        selection: tie_break,
    })
}

/// Routes each arrival of topic `x` to expert `i` with probability
/// `s[i][x]`, regardless of where it arrived. Each expert then serves its own
/// queues and idles only when they are all empty.
pub fn offline_routing_scheduler(
    inst: &Instance,
    policy: &RoutingPolicy,
    tie_break: TieBreak,
) -> Result<Scheduler, SchedError> {
    routing_from_matrix(inst, &policy.s, tie_break)
}

pub fn routing_from_matrix(
    inst: &Instance,
    s: &[Vec<f64>],
    tie_break: TieBreak,
) -> Result<Scheduler, SchedError> {
    capacity::validate_routing(s, &inst.experts).map_err(SchedError::Routing)?;
    let cdf = (0..inst.topics)
        .map(|x| {
            let mut acc = 0.0;
            s.iter()
                .map(|row| {
                    acc += row[x];
                    acc
                })
                .collect()
        })
        .collect();
    Ok(Scheduler {
        kind: SchedulerKind::Routing,
        experts: inst.n(),
        topics: inst.topics,
        admission: Admission::All,
        routing: Routing::Random { cdf },
        selection: tie_break,
    })
}

/// Negative control: sends every topic to the expert with the largest
/// finite `p(x)/q_i(x)`, i.e. the slowest expert that can answer it (lowest
/// index on ties). Topics nobody can answer are dropped at the door.
pub fn mismatch_baseline(inst: &Instance, tie_break: TieBreak) -> Scheduler {
    Scheduler {
        kind: SchedulerKind::Baseline,
        experts: inst.n(),
        topics: inst.topics,
        admission: Admission::All,
        routing: Routing::Fixed(baseline_destinations(inst)),
        selection: tie_break,
    }
}

fn baseline_destinations(inst: &Instance) -> Vec<Option<usize>> {
    (0..inst.topics)
        .map(|x| {
            let mut best: Option<(usize, f64)> = None;
            for (i, e) in inst.experts.iter().enumerate() {
                let q = e.success_prob()[x];
                if q > 0.0 && best.is_none_or(|(_, bq)| q < bq) {
                    best = Some((i, q));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect()
}

/// The baseline's routing as a 0/1 matrix `s[i][x]`.
pub fn baseline_matrix(inst: &Instance) -> Vec<Vec<f64>> {
    let dest = baseline_destinations(inst);
    let mut s = vec![vec![0.0; inst.topics]; inst.n()];
    for (x, d) in dest.iter().enumerate() {
        if let Some(i) = d {
            s[*i][x] = 1.0;
        }
    }
    s
}

// ---------------------------------------------------------------------------
// Config form

/// Scheduler selection as it appears in run configs. Certificates left out
/// are computed from the capacity module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<Vec<f64>>>,
    /// Loss budget used to compute `mu` when it is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl SchedulerSpec {
    pub fn new(kind: SchedulerKind) -> Self {
        Self {
            kind,
            tie_break: TieBreak::default(),
            mu: None,
            s: None,
            epsilon: None,
        }
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    pub fn with_mu(mut self, mu: Vec<f64>) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn with_s(mut self, s: Vec<Vec<f64>>) -> Self {
        self.s = Some(s);
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = Some(epsilon);
        self
    }

    pub fn build(&self, inst: &Instance) -> Result<Scheduler, SchedError> {
        match self.kind {
            SchedulerKind::WorkConserving => work_conserving_single(inst, self.tie_break),
            SchedulerKind::Loss => {
                let policy = match (&self.mu, self.epsilon) {
                    (Some(mu), eps) => LossPolicy {
                        mu: mu.clone(),
                        epsilon: eps.unwrap_or(0.0),
                    },
                    (None, Some(eps)) => {
                        let pmf = inst.arrivals.pmf.first().ok_or_else(|| {
                            SchedError::MissingCertificate("instance has no experts".into())
                        })?;
                        let q = inst.experts[0].success_prob();
                        let result = capacity::loss_capacity(pmf, q, eps).map_err(missing)?;
                        result
                            .loss_policy()
                            .cloned()
                            .ok_or_else(|| SchedError::MissingCertificate("no mu computed".into()))?
                    }
                    (None, None) => {
                        return Err(SchedError::MissingCertificate(
                            "loss scheduler needs `mu` or `epsilon`".into(),
                        ))
                    }
                };
                offline_loss_scheduler(inst, &policy, self.tie_break)
            }
            SchedulerKind::Routing => {
                let s = match &self.s {
                    Some(s) => s.clone(),
                    None => {
                        let p = inst.normalized_merged_pmf();
                        let result =
                            capacity::multi_capacity_dual(&p, &inst.experts).map_err(missing)?;
                        result
                            .routing_policy()
                            .map(|r| r.s.clone())
                            .ok_or_else(|| SchedError::MissingCertificate("no s computed".into()))?
                    }
                };
                routing_from_matrix(inst, &s, self.tie_break)
            }
            SchedulerKind::Baseline => Ok(mismatch_baseline(inst, self.tie_break)),
        }
    }
}

fn missing(e: CapacityError) -> SchedError {
    SchedError::MissingCertificate(e.to_string())
}
