//! Slotted simulation of the request queues.
//!
//! Each slot: every `(expert i, topic x)` pair gets a Bernoulli arrival with
//! probability `lambda * p_i(x)`; arrivals pass the scheduler's admission and
//! routing rules and are enqueued; each expert then picks at most one queued
//! request and answers it with probability `q_i(x)`. Requests are counters,
//! so a failed attempt leaves no trace beyond the queue length.
//!
//! Randomness is split into independent ChaCha8 streams keyed by
//! `(purpose, expert, topic)`, so changing the scheduler never perturbs the
//! arrival sequence.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, Violation};
use crate::sched::{SchedError, Scheduler, SchedulerSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid instance: {}", join_violations(.0))]
    InvalidInstance(Vec<Violation>),
    #[error("horizon must be at least 1 slot")]
    Horizon,
    #[error("sample interval must be at least 1 slot")]
    SampleInterval,
    #[error(transparent)]
    Scheduler(#[from] SchedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

// ---------------------------------------------------------------------------
// Random streams

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Arrival = 1,
    Admission = 2,
    Routing = 3,
    Selection = 4,
    Service = 5,
    Geometric = 6,
}

/// Deterministic generator for one `(purpose, expert, topic)` stream.
pub fn stream(seed: u64, purpose: Purpose, expert: usize, topic: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) | ((expert as u64 & 0xFF_FFFF) << 32) | (topic as u64 & 0xFFFF_FFFF);
    rng.set_stream(id);
    rng
}

/// All streams a run needs.
#[derive(Debug, Clone)]
pub struct RandomStreams {
    arrival: Vec<Vec<ChaCha8Rng>>,
    admission: Vec<Vec<ChaCha8Rng>>,
    routing: Vec<Vec<ChaCha8Rng>>,
    selection: Vec<ChaCha8Rng>,
    service: Vec<ChaCha8Rng>,
}

impl RandomStreams {
    pub fn new(seed: u64, experts: usize, topics: usize) -> Self {
        let grid = |purpose| {
            (0..experts)
                .map(|i| (0..topics).map(|x| stream(seed, purpose, i, x)).collect())
                .collect()
        };
        Self {
            arrival: grid(Purpose::Arrival),
            admission: grid(Purpose::Admission),
            routing: grid(Purpose::Routing),
            selection: (0..experts).map(|i| stream(seed, Purpose::Selection, i, 0)).collect(),
            service: (0..experts).map(|i| stream(seed, Purpose::Service, i, 0)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// State and events

/// Queue lengths and cumulative counters, indexed `[expert][topic]`.
///
/// `cum_arrivals` counts requests enqueued at the destination expert;
/// `cum_offered` and `cum_losses` are indexed by the expert where the request
/// arrived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueState {
    pub t: u64,
    pub queues: Vec<Vec<u64>>,
    pub cum_offered: Vec<Vec<u64>>,
    pub cum_arrivals: Vec<Vec<u64>>,
    pub cum_departures: Vec<Vec<u64>>,
    pub cum_losses: Vec<Vec<u64>>,
}

impl QueueState {
    pub fn empty(experts: usize, topics: usize) -> Self {
        let zeros = vec![vec![0; topics]; experts];
        Self {
            t: 0,
            queues: zeros.clone(),
            cum_offered: zeros.clone(),
            cum_arrivals: zeros.clone(),
            cum_departures: zeros.clone(),
            cum_losses: zeros,
        }
    }

    /// `Q_{x,i}(t)`.
    pub fn len(&self, topic: usize, expert: usize) -> u64 {
        self.queues[expert][topic]
    }

    pub fn expert_total(&self, expert: usize) -> u64 {
        self.queues[expert].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.queues.iter().flatten().sum()
    }

    pub fn total_losses(&self) -> u64 {
        self.cum_losses.iter().flatten().sum()
    }

    pub fn total_departures(&self) -> u64 {
        self.cum_departures.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub topic: usize,
    pub source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admitted {
    pub topic: usize,
    pub source: usize,
    pub dest: usize,
}

/// Everything that happened in one slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotEvents {
    pub arrivals: Vec<Arrival>,
    pub admitted: Vec<Admitted>,
    pub rejected: Vec<Arrival>,
    /// Topic served by each expert, if any.
    pub assignments: Vec<Option<usize>>,
    /// `(topic, expert)` pairs answered this slot.
    pub completions: Vec<(usize, usize)>,
    /// Requests queued at each expert before this slot's arrivals.
    pub queued_at_start: Vec<u64>,
    /// Requests queued at each expert when the scheduler made its choice.
    pub queued_at_selection: Vec<u64>,
}

/// Advances `state` by one slot.
pub fn step(
    state: &mut QueueState,
    inst: &Instance,
    sched: &Scheduler,
    streams: &mut RandomStreams,
) -> SlotEvents {
    let n = inst.n();
    let topics = inst.topics;
    let lambda = inst.arrivals.lambda;
    let mut ev = SlotEvents {
        assignments: vec![None; n],
        queued_at_start: (0..n).map(|i| state.expert_total(i)).collect(),
        ..SlotEvents::default()
    };

    for source in 0..n {
        for topic in 0..topics {
            let prob = lambda * inst.arrivals.pmf[source][topic];
            let arrived = streams.arrival[source][topic].random::<f64>() < prob;
            if !arrived {
                continue;
            }
            let a = Arrival { topic, source };
            ev.arrivals.push(a);
            state.cum_offered[source][topic] += 1;
            let dest = if sched.admit(topic, &mut streams.admission[source][topic]) {
                sched.route(topic, source, &mut streams.routing[source][topic])
            } else {
                None
            };
            match dest {
                Some(dest) => {
                    state.queues[dest][topic] += 1;
                    state.cum_arrivals[dest][topic] += 1;
                    ev.admitted.push(Admitted { topic, source, dest });
                }
                None => {
                    state.cum_losses[source][topic] += 1;
                    ev.rejected.push(a);
                }
            }
        }
    }

    ev.queued_at_selection = (0..n).map(|i| state.expert_total(i)).collect();
    for expert in 0..n {
        let choice = sched.select(&state.queues[expert], &mut streams.selection[expert]);
        ev.assignments[expert] = choice;
        if let Some(topic) = choice {
            let q = inst.experts[expert].success_prob()[topic];
            if streams.service[expert].random::<f64>() < q {
                state.queues[expert][topic] -= 1;
                state.cum_departures[expert][topic] += 1;
                ev.completions.push((topic, expert));
            }
        }
    }

    state.t += 1;
    ev
}

/// A running simulation: instance, scheduler, state and streams.
pub struct Simulation<'a> {
    inst: &'a Instance,
    sched: &'a Scheduler,
    state: QueueState,
    streams: RandomStreams,
}

impl<'a> Simulation<'a> {
    pub fn new(inst: &'a Instance, sched: &'a Scheduler, seed: u64) -> Result<Self, SimError> {
        let violations = inst.validate();
        if !violations.is_empty() {
            return Err(SimError::InvalidInstance(violations));
        }
        sched.check_compatible(inst)?;
        Ok(Self {
            inst,
            sched,
            state: QueueState::empty(inst.n(), inst.topics),
            streams: RandomStreams::new(seed, inst.n(), inst.topics),
        })
    }

    /// Replaces the current state, e.g. to start from nonempty queues.
    pub fn with_state(mut self, state: QueueState) -> Self {
        self.state = state;
        self
    }

    pub fn step(&mut self) -> SlotEvents {
        step(&mut self.state, self.inst, self.sched, &mut self.streams)
    }

    pub fn state(&self) -> &QueueState {
        &self.state
    }
}

// ---------------------------------------------------------------------------
// Runs and statistics

fn default_sample_interval() -> u64 {
    100
}

/// A full run description, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub instance: Instance,
    pub scheduler: SchedulerSpec,
    pub horizon: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: u64,
    /// Keep per-slot Lyapunov drift statistics.
    #[serde(default)]
    pub record_drift: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub horizon: u64,
    pub seed: u64,
    pub sample_interval: u64,
    pub record_drift: bool,
}

impl RunOptions {
    pub fn new(horizon: u64, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            sample_interval: default_sample_interval(),
            record_drift: false,
        }
    }

    pub fn with_drift(mut self) -> Self {
        self.record_drift = true;
        self
    }

    pub fn with_sample_interval(mut self, sample_interval: u64) -> Self {
        self.sample_interval = sample_interval;
        self
    }
}

/// One row of the sampled time series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub t: u64,
    pub total_queue: u64,
    pub cum_loss: u64,
    pub cum_departures: u64,
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn standard_error(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Per-expert one-slot changes of `L_i(t) = sum_x Q_{x,i}(t) / q_i(x)`.
/// `L_i` is observed at service-selection time, after the slot's arrivals,
/// and each change runs to the next selection time. Changes are split by
/// whether the expert had work at the first selection. Topics with
/// `q_i(x) = 0` are left out of `L_i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DriftTrace {
    pub busy: Moments,
    pub idle: Moments,
    /// `(t, L_i(t))` at each sample point.
    pub lyapunov_series: Vec<(u64, f64)>,
}

/// Output of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    pub horizon: u64,
    pub sample_interval: u64,
    pub lambda: f64,
    pub samples: Vec<Sample>,
    /// Time average of `sum_x Q_{x,i}(t)` over `t = 1..=horizon`, per expert.
    pub mean_queue: Vec<f64>,
    pub mean_total_queue: f64,
    pub final_quarter_mean_queue: Vec<f64>,
    pub final_quarter_mean_total_queue: f64,
    /// Rejections per slot, by the expert where requests arrived.
    pub loss_rate: Vec<f64>,
    pub final_quarter_loss_rate: Vec<f64>,
    /// Departures per slot, whole system.
    pub throughput: f64,
    /// Fraction of slots that start with the expert's queues empty.
    pub empty_fraction: Vec<f64>,
    /// Fraction of slots that start with every queue empty.
    pub system_empty_fraction: f64,
    pub final_state: QueueState,
    pub drift: Option<Vec<DriftTrace>>,
}

impl TraceStats {
    pub fn experts(&self) -> usize {
        self.mean_queue.len()
    }

    pub fn total_loss_rate(&self) -> f64 {
        self.loss_rate.iter().sum()
    }

    /// Flat CSV: `t,total_queue,cum_loss,cum_departures`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.samples {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            horizon: self.horizon,
            lambda: self.lambda,
            mean_queue: self.mean_queue.clone(),
            mean_total_queue: self.mean_total_queue,
            loss_rate: self.loss_rate.clone(),
            throughput: self.throughput,
            final_quarter_mean_queue: self.final_quarter_mean_queue.clone(),
            final_quarter_mean_total_queue: self.final_quarter_mean_total_queue,
            final_quarter_loss_rate: self.final_quarter_loss_rate.clone(),
            empty_fraction: self.empty_fraction.clone(),
            system_empty_fraction: self.system_empty_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub horizon: u64,
    pub lambda: f64,
    pub mean_queue: Vec<f64>,
    pub mean_total_queue: f64,
    pub loss_rate: Vec<f64>,
    pub throughput: f64,
    pub final_quarter_mean_queue: Vec<f64>,
    pub final_quarter_mean_total_queue: f64,
    pub final_quarter_loss_rate: Vec<f64>,
    pub empty_fraction: Vec<f64>,
    pub system_empty_fraction: f64,
}

/// Builds the scheduler named in `config` and runs it.
pub fn run(config: &SimConfig) -> Result<TraceStats, SimError> {
    let sched = config.scheduler.build(&config.instance)?;
    run_with(
        &config.instance,
        &sched,
        RunOptions {
            horizon: config.horizon,
            seed: config.seed,
            sample_interval: config.sample_interval,
            record_drift: config.record_drift,
        },
    )
}

pub fn run_with(inst: &Instance, sched: &Scheduler, opts: RunOptions) -> Result<TraceStats, SimError> {
    let sim = Simulation::new(inst, sched, opts.seed)?;
    run_simulation(sim, opts)
}

/// Runs an already-constructed simulation for `opts.horizon` slots.
pub fn run_simulation(mut sim: Simulation<'_>, opts: RunOptions) -> Result<TraceStats, SimError> {
    if opts.horizon == 0 {
        return Err(SimError::Horizon);
    }
    if opts.sample_interval == 0 {
        return Err(SimError::SampleInterval);
    }
    let inst = sim.inst;
    let n = inst.n();
    let horizon = opts.horizon;
    let quarter_start = horizon - (horizon / 4).max(1);

    let weights: Vec<Vec<f64>> = inst
        .experts
        .iter()
        .map(|e| {
            e.success_prob()
                .iter()
                .map(|&q| if q > 0.0 { 1.0 / q } else { 0.0 })
                .collect()
        })
        .collect();
    let lyapunov = |state: &QueueState, i: usize| -> f64 {
        state.queues[i]
            .iter()
            .zip(&weights[i])
            .map(|(&q, &w)| q as f64 * w)
            .sum()
    };

    let mut drift: Option<Vec<DriftTrace>> = opts.record_drift.then(|| vec![DriftTrace::default(); n]);
    let sample = |state: &QueueState| Sample {
        t: state.t,
        total_queue: state.total(),
        cum_loss: state.total_losses(),
        cum_departures: state.total_departures(),
    };
    let mut samples = vec![sample(sim.state())];
    if let Some(d) = drift.as_mut() {
        for (i, trace) in d.iter_mut().enumerate() {
            trace.lyapunov_series.push((0, lyapunov(sim.state(), i)));
        }
    }

    let mut pending: Vec<Option<(bool, f64)>> = vec![None; n];
    let mut queue_sum = vec![0.0f64; n];
    let mut quarter_queue_sum = vec![0.0f64; n];
    let mut quarter_losses = vec![0u64; n];
    let mut empty_slots = vec![0u64; n];
    let mut system_empty_slots = 0u64;
    let start_departures = sim.state().total_departures();
    let start_losses: Vec<u64> = sim.state().cum_losses.iter().map(|r| r.iter().sum()).collect();

    for t in 1..=horizon {
        let ev = sim.step();
        let state = sim.state();
        if ev.queued_at_start.iter().all(|&q| q == 0) {
            system_empty_slots += 1;
        }
        for i in 0..n {
            if ev.queued_at_start[i] == 0 {
                empty_slots[i] += 1;
            }
            let qi = state.expert_total(i) as f64;
            queue_sum[i] += qi;
            if t > quarter_start {
                quarter_queue_sum[i] += qi;
            }
        }
        if t > quarter_start {
            for r in &ev.rejected {
                quarter_losses[r.source] += 1;
            }
        }
        if let Some(d) = drift.as_mut() {
            // Close the change opened at the previous selection with this
            // slot's arrivals, then open the next one with its departures.
            let mut arrived = vec![0.0; n];
            for a in &ev.admitted {
                arrived[a.dest] += weights[a.dest][a.topic];
            }
            for (i, trace) in d.iter_mut().enumerate() {
                if let Some((busy, served)) = pending[i] {
                    let change = arrived[i] - served;
                    if busy {
                        trace.busy.push(change);
                    } else {
                        trace.idle.push(change);
                    }
                }
            }
            let mut served = vec![0.0; n];
            for &(topic, i) in &ev.completions {
                served[i] += weights[i][topic];
            }
            for i in 0..n {
                pending[i] = Some((ev.queued_at_selection[i] > 0, served[i]));
            }
        }
        if t % opts.sample_interval == 0 || t == horizon {
            samples.push(sample(state));
            if let Some(d) = drift.as_mut() {
                for (i, trace) in d.iter_mut().enumerate() {
                    trace.lyapunov_series.push((t, lyapunov(state, i)));
                }
            }
        }
    }

    let state = sim.state().clone();
    let h = horizon as f64;
    let quarter_len = (horizon - quarter_start) as f64;
    let losses: Vec<u64> = state
        .cum_losses
        .iter()
        .zip(&start_losses)
        .map(|(r, s)| r.iter().sum::<u64>() - s)
        .collect();
    let mean_queue: Vec<f64> = queue_sum.iter().map(|s| s / h).collect();
    let final_quarter_mean_queue: Vec<f64> = quarter_queue_sum.iter().map(|s| s / quarter_len).collect();
    Ok(TraceStats {
        horizon,
        sample_interval: opts.sample_interval,
        lambda: inst.arrivals.lambda,
        samples,
        mean_total_queue: mean_queue.iter().sum(),
        mean_queue,
        final_quarter_mean_total_queue: final_quarter_mean_queue.iter().sum(),
        final_quarter_mean_queue,
        loss_rate: losses.iter().map(|&l| l as f64 / h).collect(),
        final_quarter_loss_rate: quarter_losses.iter().map(|&l| l as f64 / quarter_len).collect(),
        throughput: (state.total_departures() - start_departures) as f64 / h,
        empty_fraction: empty_slots.iter().map(|&e| e as f64 / h).collect(),
        system_empty_fraction: system_empty_slots as f64 / h,
        final_state: state,
        drift,
    })
}

// ---------------------------------------------------------------------------
// Geometric service

/// Mean slots-to-success over repeated independent attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometricCheck {
    pub q: f64,
    pub trials: u64,
    pub mean: f64,
    pub expected: f64,
    /// `sqrt(1 - q) / q / sqrt(trials)`.
    pub standard_error: f64,
}

impl GeometricCheck {
    pub fn within(&self, sigmas: f64) -> bool {
        (self.mean - self.expected).abs() <= sigmas * self.standard_error + 1e-12
    }
}

pub fn geometric_service_check<R: Rng + ?Sized>(q: f64, trials: u64, rng: &mut R) -> GeometricCheck {
    assert!(q > 0.0 && q <= 1.0, "success probability must lie in (0, 1]");
    let mut total: u64 = 0;
    for _ in 0..trials {
        let mut slots = 1;
        while rng.random::<f64>() >= q {
            slots += 1;
        }
        total += slots;
    }
    GeometricCheck {
        q,
        trials,
        mean: total as f64 / trials as f64,
        expected: 1.0 / q,
        standard_error: (1.0 - q).sqrt() / q / (trials as f64).sqrt(),
    }
}
