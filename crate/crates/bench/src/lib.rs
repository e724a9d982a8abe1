//! Fixtures shared by the benchmarks.

use twoscale::mdp::random_mdp;
use twoscale::{
    FeatureMap, FiniteMdp, OracleSolution, Policy, RewardNoise, SchedulePair, Sparsity, StepSchedule, TdcProblem,
};

pub fn chain3() -> TdcProblem {
    TdcProblem::new(
        FiniteMdp::chain3(),
        Policy::greedy_on(3, 2, 1).unwrap(),
        Policy::uniform(3, 2),
        FeatureMap::tabular(3),
        RewardNoise::uniform(0.5),
    )
    .unwrap()
}

/// Dense random instance with `d` random features and a greedy target.
pub fn random(n_states: usize, d: usize, seed: u64) -> TdcProblem {
    TdcProblem::new(
        random_mdp(n_states, 2, Sparsity::Dense, seed).unwrap(),
        Policy::greedy_on(n_states, 2, 0).unwrap(),
        Policy::uniform(n_states, 2),
        FeatureMap::random(n_states, d, seed).unwrap(),
        RewardNoise::NONE,
    )
    .unwrap()
}

pub fn oracle(p: &TdcProblem) -> OracleSolution {
    OracleSolution::solve(p.mdp(), p.target(), p.behavior(), p.features()).unwrap()
}

pub fn schedule() -> SchedulePair {
    SchedulePair::new(StepSchedule::relative(0.5, 1e4, 1.0), StepSchedule::relative(0.5, 1e4, 0.6))
}
