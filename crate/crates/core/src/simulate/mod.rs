//! Monte Carlo simulation of the population, its mean-field limit and the
//! associated costs.

pub mod cost;
pub mod engine;
pub mod noise;

pub use cost::{
    estimate_cost_limit, estimate_cost_population, mc_value, population_costs,
    summarize_population, trajectory_costs, CostEstimate, CostTag,
};
pub use engine::{
    simulate_limit, simulate_limit_agents, simulate_mean_process, simulate_population, steps_for,
    MeanProcessPath, PopulationTrajectory, SimPlan,
};
pub use noise::{NoiseBundle, StreamKey};

/// Default Euler-Maruyama steps per unit time.
pub const DEFAULT_SDE_STEPS: usize = 2000;

#[cfg(test)]
mod tests;
