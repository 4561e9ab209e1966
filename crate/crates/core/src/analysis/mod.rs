//! Experiments built on the solver and the simulator.

pub mod convergence;
pub mod optimality;
pub mod ordering;
pub mod paper;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::riccati::{regularity, RiccatiSolution};

pub use convergence::{convergence_study, ConvergenceReport};
pub use optimality::{
    law_value, perturbation_along, perturbation_optimality, Direction, LawValue,
    PerturbationConfig, PerturbationReport,
};
pub use ordering::{ordering_check, OrderingReport};
pub use paper::{paper_example, paper_spec, special_spec};

pub const DEFAULT_N_LIST: [usize; 4] = [4, 16, 64, 256];
pub const DEFAULT_REPLICATIONS: usize = 500;
pub const DEFAULT_OPTIMALITY_REPLICATIONS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 20240601;

/// Knobs shared by the population experiments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    #[serde(rename = "M")]
    pub replications: usize,
    pub seed: u64,
    pub sde_steps: usize,
    pub eps_reg: f64,
    /// Overrides the problem's Riccati grid when set.
    pub n_t: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_list: DEFAULT_N_LIST.to_vec(),
            replications: DEFAULT_REPLICATIONS,
            seed: DEFAULT_SEED,
            sde_steps: crate::simulate::DEFAULT_SDE_STEPS,
            eps_reg: crate::riccati::DEFAULT_EPS_REG,
            n_t: None,
        }
    }
}

/// Fails with [`Error::Irregular`] unless every gain operator stays above
/// `eps_reg` on the grid.
pub fn certify(sols: &[&RiccatiSolution], eps_reg: f64) -> Result<()> {
    for sol in sols {
        let rep = regularity(sol, eps_reg);
        if !rep.pass {
            return Err(Error::Irregular(format!(
                "{} operator has min eigenvalue {:e} at t = {} (threshold {:e})",
                sol.tag.name(),
                rep.global_min,
                rep.argmin_time,
                eps_reg
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_n_list(n_list: &[usize], min_len: usize) -> Result<()> {
    if n_list.len() < min_len {
        return Err(Error::validation(
            "N",
            format!("need at least {min_len} population sizes"),
        ));
    }
    if n_list[0] == 0 || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation(
            "N",
            "population sizes must be positive and strictly increasing",
        ));
    }
    Ok(())
}
