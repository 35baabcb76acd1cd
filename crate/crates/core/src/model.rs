//! Problem instances: experts, topics and arrival rates.
//!
//! Topics are dense indices `0..topics`. An expert is described by its mean
//! research time `T(x) >= 1` per topic (infinite when the expert cannot answer
//! that topic); the per-slot success probability is `q(x) = 1 / T(x)`.
//! Arrivals at expert `i` for topic `x` are Bernoulli with probability
//! `lambda * p_i(x)` each slot.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Tolerance for p.m.f. normalization checks.
pub const PMF_TOLERANCE: f64 = 1e-9;

/// Tolerance for `q = 1/T` consistency.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-12;

/// Dense topic index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicId(pub usize);

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// One expert's per-topic skill.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertProfile {
    pub expert_id: usize,
    mean_time: Vec<f64>,
    success_prob: Vec<f64>,
}

impl ExpertProfile {
    /// Builds a profile from mean research times. `f64::INFINITY` marks a
    /// topic the expert cannot answer.
    pub fn from_mean_times(expert_id: usize, mean_time: Vec<f64>) -> Self {
        let success_prob = mean_time
            .iter()
            .map(|&t| if t.is_infinite() { 0.0 } else { 1.0 / t })
            .collect();
        Self {
            expert_id,
            mean_time,
            success_prob,
        }
    }

    /// Builds a profile from per-slot success probabilities; `q = 0` maps to
    /// an infinite mean time.
    pub fn from_success_probs(expert_id: usize, success_prob: Vec<f64>) -> Self {
        let mean_time = success_prob
            .iter()
            .map(|&q| if q == 0.0 { f64::INFINITY } else { 1.0 / q })
            .collect();
        Self {
            expert_id,
            mean_time,
            success_prob,
        }
    }

    pub fn mean_time(&self) -> &[f64] {
        &self.mean_time
    }

    pub fn success_prob(&self) -> &[f64] {
        &self.success_prob
    }

    pub fn topics(&self) -> usize {
        self.success_prob.len()
    }

    /// Whether this expert can ever answer topic `x`.
    pub fn answers(&self, x: usize) -> bool {
        self.success_prob[x] > 0.0
    }
}

/// Crude expertise measure `R = sum_x q(x)`.
pub fn expertise(e: &ExpertProfile) -> f64 {
    e.success_prob.iter().sum()
}

/// Load and per-expert topic p.m.f.s.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSpec {
    pub lambda: f64,
    /// `pmf[i][x] = p_i(x)`.
    pub pmf: Vec<Vec<f64>>,
}

/// Coordination topology. Only the complete graph is supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Graph {
    #[default]
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub topics: usize,
    pub experts: Vec<ExpertProfile>,
    pub arrivals: ArrivalSpec,
    pub graph: Graph,
}

/// A single failed invariant, located by field and index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(field: &str, expert: Option<usize>, topic: Option<usize>, message: String) -> Self {
        Self {
            field: field.to_string(),
            expert,
            topic,
            message,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.field)?;
        if let Some(i) = self.expert {
            write!(f, " [expert {i}]")?;
        }
        if let Some(x) = self.topic {
            write!(f, " [topic {x}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl Instance {
    /// Single-expert instance from `p` and `q`.
    pub fn single(lambda: f64, p: Vec<f64>, q: Vec<f64>) -> Self {
        let topics = p.len();
        Self {
            topics,
            experts: vec![ExpertProfile::from_success_probs(0, q)],
            arrivals: ArrivalSpec {
                lambda,
                pmf: vec![p],
            },
            graph: Graph::Complete,
        }
    }

    /// Multi-expert instance where expert `i` sees arrivals `lambda * pmf[i]`
    /// and succeeds with probability `q[i]`.
    pub fn multi(lambda: f64, pmf: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> Self {
        let topics = pmf.first().map_or(0, Vec::len);
        Self {
            topics,
            experts: q
                .into_iter()
                .enumerate()
                .map(|(i, q)| ExpertProfile::from_success_probs(i, q))
                .collect(),
            arrivals: ArrivalSpec { lambda, pmf },
            graph: Graph::Complete,
        }
    }

    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn lambda(&self) -> f64 {
        self.arrivals.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut inst = self.clone();
        inst.arrivals.lambda = lambda;
        inst
    }

    /// `p(x) = sum_i p_i(x)`; sums to `n`, not 1.
    pub fn merged_pmf(&self) -> Vec<f64> {
        let mut merged = vec![0.0; self.topics];
        for row in &self.arrivals.pmf {
            for (m, &p) in merged.iter_mut().zip(row) {
                *m += p;
            }
        }
        merged
    }

    /// Merged p.m.f. divided by `n`, so it sums to 1. Capacities computed from
    /// it are in units of total system load; divide by `n` for the per-expert
    /// `lambda` used by the arrival model.
    pub fn normalized_merged_pmf(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.merged_pmf().into_iter().map(|p| p / n).collect()
    }

    pub fn success_matrix(&self) -> Vec<Vec<f64>> {
        self.experts
            .iter()
            .map(|e| e.success_prob().to_vec())
            .collect()
    }

    /// Checks every structural invariant; an empty list means the instance
    /// is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate_instance(self)
    }
}

pub fn merged_pmf(inst: &Instance) -> Vec<f64> {
    inst.merged_pmf()
}

pub fn validate_instance(inst: &Instance) -> Vec<Violation> {
    let mut out = Vec::new();
    let topics = inst.topics;
    if topics == 0 {
        out.push(Violation::new("topics", None, None, "topic universe is empty".into()));
    }
    if inst.experts.is_empty() {
        out.push(Violation::new("experts", None, None, "at least one expert is required".into()));
    }

    let lambda = inst.arrivals.lambda;
    if !lambda.is_finite() || lambda < 0.0 {
        out.push(Violation::new(
            "lambda",
            None,
            None,
            format!("load must be a finite non-negative number, got {lambda}"),
        ));
    }

    if inst.arrivals.pmf.len() != inst.experts.len() {
        out.push(Violation::new(
            "pmf",
            None,
            None,
            format!(
                "expected one p.m.f. per expert ({}), got {}",
                inst.experts.len(),
                inst.arrivals.pmf.len()
            ),
        ));
    }
    for (i, row) in inst.arrivals.pmf.iter().enumerate() {
        if row.len() != topics {
            out.push(Violation::new(
                "pmf",
                Some(i),
                None,
                format!("expected {topics} entries, got {}", row.len()),
            ));
            continue;
        }
        let mut bad_entry = false;
        for (x, &p) in row.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                bad_entry = true;
                out.push(Violation::new(
                    "pmf",
                    Some(i),
                    Some(x),
                    format!("probability must be finite and >= 0, got {p}"),
                ));
            } else if lambda.is_finite() && lambda * p > 1.0 + PMF_TOLERANCE {
                out.push(Violation::new(
                    "lambda",
                    Some(i),
                    Some(x),
                    format!("arrival probability lambda*p = {} exceeds 1", lambda * p),
                ));
            }
        }
        let sum: f64 = row.iter().sum();
        if !bad_entry && (sum - 1.0).abs() > PMF_TOLERANCE {
            out.push(Violation::new(
                "pmf",
                Some(i),
                None,
                format!("p.m.f. sums to {sum}, expected 1"),
            ));
        }
    }

    for (i, e) in inst.experts.iter().enumerate() {
        if e.mean_time.len() != topics || e.success_prob.len() != topics {
            out.push(Violation::new(
                "mean_time",
                Some(i),
                None,
                format!("expected {topics} entries, got {}", e.mean_time.len()),
            ));
            continue;
        }
        for x in 0..topics {
            let t = e.mean_time[x];
            let q = e.success_prob[x];
            if t.is_nan() || t < 1.0 {
                out.push(Violation::new(
                    "mean_time",
                    Some(i),
                    Some(x),
                    format!("mean research time must satisfy T(x) >= 1, got {t}"),
                ));
                continue;
            }
            if !(0.0..=1.0).contains(&q) {
                out.push(Violation::new(
                    "success_prob",
                    Some(i),
                    Some(x),
                    format!("success probability must lie in [0, 1], got {q}"),
                ));
                continue;
            }
            let consistent = if t.is_infinite() {
                q == 0.0
            } else {
                (q - 1.0 / t).abs() <= CONSISTENCY_TOLERANCE
            };
            if !consistent {
                out.push(Violation::new(
                    "success_prob",
                    Some(i),
                    Some(x),
                    format!("q(x) = {q} is inconsistent with T(x) = {t}"),
                ));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON document

/// On-disk instance format. `T` entries of `null` mean infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub topics: usize,
    pub lambda: f64,
    pub pmf: Vec<Vec<f64>>,
    pub experts: Vec<ExpertDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertDoc {
    pub id: usize,
    #[serde(rename = "T")]
    pub mean_time: Vec<Option<f64>>,
}

impl From<&InstanceDoc> for Instance {
    fn from(doc: &InstanceDoc) -> Self {
        Instance {
            topics: doc.topics,
            experts: doc
                .experts
                .iter()
                .map(|e| {
                    ExpertProfile::from_mean_times(
                        e.id,
                        e.mean_time
                            .iter()
                            .map(|t| t.unwrap_or(f64::INFINITY))
                            .collect(),
                    )
                })
                .collect(),
            arrivals: ArrivalSpec {
                lambda: doc.lambda,
                pmf: doc.pmf.clone(),
            },
            graph: Graph::Complete,
        }
    }
}

impl From<&Instance> for InstanceDoc {
    fn from(inst: &Instance) -> Self {
        InstanceDoc {
            topics: inst.topics,
            lambda: inst.arrivals.lambda,
            pmf: inst.arrivals.pmf.clone(),
            experts: inst
                .experts
                .iter()
                .map(|e| ExpertDoc {
                    id: e.expert_id,
                    mean_time: e
                        .mean_time
                        .iter()
                        .map(|&t| if t.is_infinite() { None } else { Some(t) })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl Serialize for Instance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        InstanceDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = InstanceDoc::deserialize(d)?;
        Ok(Instance::from(&doc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_three() -> Instance {
        Instance::multi(
            0.5,
            vec![vec![0.2, 0.3, 0.5], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
            vec![vec![1.0, 0.5, 0.25], vec![0.0, 1.0, 0.1]],
        )
    }

    #[test]
    fn well_formed_instance_has_no_violations() {
        assert!(validate_instance(&two_by_three()).is_empty());
    }

    #[test]
    fn unnormalized_pmf_is_reported_against_its_expert() {
        let mut inst = two_by_three();
        inst.arrivals.pmf[1] = vec![0.3, 0.3, 0.3];
        let v = validate_instance(&inst);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "pmf");
        assert_eq!(v[0].expert, Some(1));
        assert_eq!(v[0].topic, None);
    }

    #[test]
    fn research_time_below_one_is_rejected() {
        let mut inst = two_by_three();
        inst.experts[0] = ExpertProfile::from_mean_times(0, vec![0.5, 2.0, 4.0]);
        let v = validate_instance(&inst);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "mean_time");
        assert_eq!((v[0].expert, v[0].topic), (Some(0), Some(0)));
        assert!(v[0].message.contains("T(x) >= 1"));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut inst = two_by_three();
        inst.arrivals.pmf.pop();
        inst.experts[1] = ExpertProfile::from_success_probs(1, vec![1.0]);
        let v = validate_instance(&inst);
        assert!(v.iter().any(|v| v.field == "pmf" && v.expert.is_none()));
        assert!(v.iter().any(|v| v.field == "mean_time" && v.expert == Some(1)));
    }

    #[test]
    fn inconsistent_probability_is_reported() {
        let mut inst = two_by_three();
        inst.experts[0].success_prob[1] = 0.4;
        let v = validate_instance(&inst);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "success_prob");
    }

    #[test]
    fn merged_pmf_examples() {
        let inst = Instance::multi(
            0.5,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        assert_eq!(inst.merged_pmf(), vec![1.0, 1.0]);

        let single = Instance::single(0.5, vec![0.25, 0.75], vec![1.0, 0.5]);
        assert_eq!(single.merged_pmf(), vec![0.25, 0.75]);

        let third = 1.0 / 3.0;
        let uniform = Instance::multi(0.5, vec![vec![third; 3]; 3], vec![vec![third; 3]; 3]);
        for p in uniform.merged_pmf() {
            assert!((p - 1.0).abs() < 1e-12);
        }
        let total: f64 = uniform.merged_pmf().iter().sum();
        assert!((total - 3.0).abs() < PMF_TOLERANCE);
        let norm: f64 = uniform.normalized_merged_pmf().iter().sum();
        assert!((norm - 1.0).abs() < PMF_TOLERANCE);
    }

    #[test]
    fn expertise_examples() {
        assert_eq!(expertise(&ExpertProfile::from_success_probs(0, vec![1.0, 0.0, 0.0])), 1.0);
        let third = 1.0 / 3.0;
        let r = expertise(&ExpertProfile::from_success_probs(0, vec![third; 3]));
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(expertise(&ExpertProfile::from_success_probs(0, vec![0.0, 0.0])), 0.0);
    }

    #[test]
    fn json_round_trip_uses_null_for_infinity() {
        let inst = two_by_three();
        let text = serde_json::to_string(&inst).unwrap();
        assert!(text.contains("null"));
        let back: Instance = serde_json::from_str(&text).unwrap();
        assert_eq!(back.experts[1].success_prob()[0], 0.0);
        assert!(back.experts[1].mean_time()[0].is_infinite());
        assert_eq!(back.arrivals, inst.arrivals);
        for (a, b) in back.experts.iter().zip(&inst.experts) {
            for (qa, qb) in a.success_prob().iter().zip(b.success_prob()) {
                assert!((qa - qb).abs() < 1e-15);
            }
        }
    }
}
