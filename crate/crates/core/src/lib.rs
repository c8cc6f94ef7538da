//! Energy-minimal scheduling of one federated-learning iteration served by a
//! massive-MIMO base station.
//!
//! The library models the downlink broadcast / local computation / uplink
//! report pipeline of several FL groups sharing a zero-forcing MIMO link,
//! and minimizes the total energy of one iteration over transmit power
//! fractions and CPU frequencies subject to a per-iteration deadline. Two
//! transmission schemes are supported: an asynchronous one, where each UE
//! starts computing as soon as its own download finishes, and a synchronous
//! one with hard stage boundaries. The optimizer runs successive convex
//! approximation over an epigraph reformulation, each inner subproblem solved
//! by a log-barrier interior-point method; simple fixed-allocation heuristics
//! and an exhaustive grid oracle (for tiny instances) serve as baselines.

pub mod baselines;
pub mod comms;
pub mod convex_solver;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod surrogate;

pub use error::{Error, Result};
pub use model::{generate_network, ChannelInstance, SystemConfig};
