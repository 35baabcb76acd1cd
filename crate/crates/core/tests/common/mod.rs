#![allow(dead_code)]

use expertq::model::{ExpertProfile, Instance};

/// One expert, two topics: `p = (1/2, 1/2)`, `q = (1, 1/2)`, `lambda* = 2/3`.
pub fn two_topic(lambda: f64) -> Instance {
    Instance::single(lambda, vec![0.5, 0.5], vec![1.0, 0.5])
}

/// Topic 0 cannot be answered: `p = (1/2, 1/2)`, `q = (0, 1/2)`.
pub fn unanswerable_topic(lambda: f64) -> Instance {
    Instance::single(lambda, vec![0.5, 0.5], vec![0.0, 0.5])
}

/// `n` experts with uniform arrivals over `n` topics; expert `i` answers only
/// topic `i`, in one slot.
pub fn diverse(n: usize, lambda: f64) -> Instance {
    let pmf = vec![vec![1.0 / n as f64; n]; n];
    let q = (0..n).map(|i| (0..n).map(|x| if x == i { 1.0 } else { 0.0 }).collect()).collect();
    Instance::multi(lambda, pmf, q)
}

/// `n` experts with uniform arrivals and `q_i(x) = 1/n` everywhere.
pub fn identical(n: usize, lambda: f64) -> Instance {
    let pmf = vec![vec![1.0 / n as f64; n]; n];
    let q = vec![vec![1.0 / n as f64; n]; n];
    Instance::multi(lambda, pmf, q)
}

pub fn profiles(q: &[Vec<f64>]) -> Vec<ExpertProfile> {
    q.iter()
        .enumerate()
        .map(|(i, row)| ExpertProfile::from_success_probs(i, row.clone()))
        .collect()
}

/// Normalizes non-negative weights into a p.m.f.
pub fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}
