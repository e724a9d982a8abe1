//! Two-timescale stochastic approximation with controlled Markov noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: finite MDPs, policies, features, trajectory sampling and importance weights.
//! - [`oracle`]: exact ground truth by enumeration (stationary law, moment matrices, the
//!   TD fixed point, the fast-iterate attractor map and the projected Bellman objective).
//! - [`engine`]: a generic driver for coupled slow/fast recursions with Markov noise.
//! - [`tdc`]: off-policy TDC with importance weighting, wired into the engine.
//! - [`ode`]: fixed-step RK4, the limiting ODE fields and the tracking diagnostic.
//! - [`audit`]: executable checks of the noise, Lipschitz and step-size assumptions.

pub mod audit;
pub mod engine;
mod error;
pub mod linalg;
pub mod mdp;
pub mod ode;
pub mod oracle;
pub mod tdc;

pub use error::{Error, Result};

pub use engine::{
    coupling_error_series, interpolate, run_two_timescale, run_two_timescale_observed, validate_schedule_pair,
    CouplingSeries, DecadeMedian, FrozenSlow, NoiseMode, RunConfig, SchedulePair, ScheduleReport, StepSchedule,
    TrajectoryLog, TwoTimescaleProblem,
};
pub use mdp::{FeatureMap, FiniteMdp, Policy, Sparsity, Transition, ValidationReport};
pub use ode::{OdeField, OdeTrajectory};
pub use oracle::{LambdaMap, OracleSolution};
pub use tdc::{RewardNoise, TdcNoise, TdcProblem};

/// Deterministic random stream used throughout the crate.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random stream from a seed.
pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
