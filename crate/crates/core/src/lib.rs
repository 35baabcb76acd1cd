//! Capacity analysis and discrete-time simulation of expert information-search
//! queues.
//!
//! Requests for information arrive per topic at a set of experts, wait in
//! per-topic virtual queues and are answered after a geometrically
//! distributed number of research slots. The crate computes analytic
//! capacities (closed form and linear programs with duality checks),
//! simulates the slot dynamics under offline schedulers, and ties the two
//! together through Lyapunov drift and stability diagnostics.

pub mod analysis;
pub mod capacity;
pub mod cli;
pub mod lp;
pub mod model;
pub mod sched;
pub mod sim;

pub use capacity::{CapacityResult, Certificate, LossPolicy, RoutingPolicy};
pub use model::{ExpertProfile, Instance, TopicId};
pub use sched::{Scheduler, TieBreak};
pub use sim::{SimConfig, TraceStats};
