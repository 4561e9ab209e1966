//! Decay of the per-agent team cost towards the limiting value.

use serde::Serialize;

use crate::analysis::{certify, check_n_list, ExperimentConfig};
use crate::error::Result;
use crate::linalg::linear_fit;
use crate::model::ProblemSpec;
use crate::riccati::{solve_re1, solve_re2, TimeGrid};
use crate::simulate::{
    mc_value, population_costs, steps_for, summarize_population, CostEstimate, CostTag, NoiseBundle,
};
use crate::strategy::synthesize_mc_mt;

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    #[serde(rename = "N")]
    pub n_list: Vec<usize>,
    pub mc_value: f64,
    pub per_agent: Vec<CostEstimate>,
    /// `|J_MT_per_agent(N) - mc_value|`
    pub gaps: Vec<f64>,
    /// Least-squares slope of `log gap` on `log N`; absent when a gap is 0.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub residual: Option<f64>,
    /// Some gap is within one standard error of zero, so the fit is noise.
    pub degenerate: bool,
    /// Gaps strictly decrease along the N list.
    pub decreasing: bool,
}

/// Simulates the control/team law for every `N` on common random numbers
/// and fits the gap decay rate.
pub fn convergence_study(spec: &ProblemSpec, cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    check_n_list(&cfg.n_list, 3)?;
    let grid = TimeGrid::new(spec.dims.horizon, cfg.n_t.unwrap_or(spec.dims.n_t));
    let p1 = solve_re1(spec, grid)?;
    let p2 = solve_re2(spec, grid, &p1)?;
    certify(&[&p1, &p2], cfg.eps_reg)?;
    let law = synthesize_mc_mt(spec, &p1, &p2)?;
    let value = mc_value(&p2, &spec.x0);
    let steps = steps_for(spec.dims.horizon, cfg.sde_steps);

    let mut per_agent = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let noise = NoiseBundle::new(cfg.seed, cfg.replications, n, steps, spec.dims.horizon);
        let costs = population_costs(spec, &law, &noise)?;
        per_agent.push(summarize_population(&costs, 0, CostTag::MtPerAgent)?);
    }
    let gaps: Vec<f64> = per_agent.iter().map(|e| (e.mean - value).abs()).collect();
    let degenerate = gaps.iter().zip(&per_agent).any(|(g, e)| *g <= e.stderr);
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let (slope, intercept, residual) = if gaps.iter().all(|&g| g > 0.0) {
        let x: Vec<f64> = cfg.n_list.iter().map(|&n| (n as f64).ln()).collect();
        let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        let (s, i, r) = linear_fit(&x, &y);
        (Some(s), Some(i), Some(r))
    } else {
        (None, None, None)
    };
    Ok(ConvergenceReport {
        n_list: cfg.n_list.clone(),
        mc_value: value,
        per_agent,
        gaps,
        slope,
        intercept,
        residual,
        degenerate,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProblemCandidate;

    #[test]
    fn zero_problem_is_degenerate() {
        let mut c = ProblemCandidate::zeros(2, 2, 1.0, 50);
        c.x0 = vec![1.0, -1.0];
        let spec = c.validate().unwrap();
        let cfg = ExperimentConfig {
            n_list: vec![1, 2, 4],
            replications: 4,
            sde_steps: 50,
            ..ExperimentConfig::default()
        };
        let rep = convergence_study(&spec, &cfg).unwrap();
        assert!(rep.gaps.iter().all(|&g| g == 0.0));
        assert!(rep.degenerate && rep.slope.is_none());
    }

    #[test]
    fn n_list_must_increase() {
        let spec = crate::analysis::paper_spec();
        let cfg = ExperimentConfig {
            n_list: vec![4, 4, 8],
            ..ExperimentConfig::default()
        };
        assert!(convergence_study(&spec, &cfg).is_err());
        let cfg = ExperimentConfig {
            n_list: vec![4, 8],
            ..ExperimentConfig::default()
        };
        assert!(convergence_study(&spec, &cfg).is_err());
    }
}
