//! Team, control and game costs side by side across population sizes.

use serde::Serialize;

use crate::analysis::{certify, check_n_list, ExperimentConfig};
use crate::error::Result;
use crate::model::{special_case_predicate, ProblemSpec, SPECIAL_CASE_TOLERANCE};
use crate::riccati::{solve_all, TimeGrid};
use crate::simulate::{mc_value, population_costs, steps_for, CostEstimate, CostTag, NoiseBundle};
use crate::strategy::{synthesize_mc_mt, synthesize_mg};

#[derive(Debug, Clone, Serialize)]
pub struct OrderingRecord {
    #[serde(rename = "N")]
    pub n: usize,
    /// Per-agent social cost under the control/team law.
    pub j_mt: CostEstimate,
    /// Individual cost under the game law, averaged over the exchangeable agents.
    pub j_mg: CostEstimate,
    /// `c / sqrt(N)`
    pub allowance: f64,
    /// `J_MT - c/sqrt(N) <= J_MC + 3 se_MT`
    pub team_below_control: bool,
    /// `J_MC <= J_MG + c/sqrt(N) + 3 se_MG`
    pub control_below_game: bool,
    /// `J_MG - J_MC > 3 se_MG`
    pub strict_game_gap: bool,
    /// `|J_MG - J_MT| <= 3 sqrt(se_MG^2 + se_MT^2) + c/sqrt(N)`
    pub game_matches_team: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderingReport {
    pub mc_value: f64,
    /// Rate constant `max_N sqrt(N) |J_MT(N) - J_MC|`.
    pub c: f64,
    pub special_case: bool,
    pub records: Vec<OrderingRecord>,
    /// Both inequalities of the chain hold at every N.
    pub chain_holds: bool,
    pub strict_gap_holds: bool,
    pub coincidence_holds: bool,
}

/// Estimates the three costs for every `N` on shared noise and checks
/// `J_MT - c/sqrt(N) <= J_MC <= J_MG + c/sqrt(N)` at three standard errors.
pub fn ordering_check(spec: &ProblemSpec, cfg: &ExperimentConfig) -> Result<OrderingReport> {
    check_n_list(&cfg.n_list, 1)?;
    let grid = TimeGrid::new(spec.dims.horizon, cfg.n_t.unwrap_or(spec.dims.n_t));
    let set = solve_all(spec, grid)?;
    certify(&[&set.p1, &set.p2, &set.p3], cfg.eps_reg)?;
    let mc = synthesize_mc_mt(spec, &set.p1, &set.p2)?;
    let mg = synthesize_mg(spec, &set.p1, &set.p3)?;
    let value = mc_value(&set.p2, &spec.x0);
    let steps = steps_for(spec.dims.horizon, cfg.sde_steps);

    let per_agent = |costs: &[Vec<f64>]| -> Vec<f64> {
        costs
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    };
    let mut estimates = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let noise = NoiseBundle::new(cfg.seed, cfg.replications, n, steps, spec.dims.horizon);
        let mt = per_agent(&population_costs(spec, &mc, &noise)?);
        let mg_costs = per_agent(&population_costs(spec, &mg, &noise)?);
        estimates.push((
            n,
            CostEstimate::from_samples(CostTag::MtPerAgent, &mt)?,
            CostEstimate::from_samples(CostTag::MgIndividual, &mg_costs)?,
        ));
    }
    let c = estimates
        .iter()
        .map(|(n, mt, _)| (*n as f64).sqrt() * (mt.mean - value).abs())
        .fold(0.0, f64::max);

    let records: Vec<OrderingRecord> = estimates
        .into_iter()
        .map(|(n, j_mt, j_mg)| {
            let allowance = c / (n as f64).sqrt();
            let combined = (j_mg.stderr.powi(2) + j_mt.stderr.powi(2)).sqrt();
            OrderingRecord {
                n,
                allowance,
                team_below_control: j_mt.mean - allowance <= value + 3.0 * j_mt.stderr,
                control_below_game: value <= j_mg.mean + allowance + 3.0 * j_mg.stderr,
                strict_game_gap: j_mg.mean - value > 3.0 * j_mg.stderr,
                game_matches_team: (j_mg.mean - j_mt.mean).abs() <= 3.0 * combined + allowance,
                j_mt,
                j_mg,
            }
        })
        .collect();
    Ok(OrderingReport {
        mc_value: value,
        c,
        special_case: special_case_predicate(spec, SPECIAL_CASE_TOLERANCE).holds,
        chain_holds: records
            .iter()
            .all(|r| r.team_below_control && r.control_below_game),
        strict_gap_holds: records.iter().all(|r| r.strict_game_gap),
        coincidence_holds: records.iter().all(|r| r.game_matches_team),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProblemCandidate;

    #[test]
    fn zero_problem_costs_coincide() {
        let mut c = ProblemCandidate::zeros(2, 2, 1.0, 50);
        c.x0 = vec![1.0, -1.0];
        c.weights.g = nalgebra::DMatrix::identity(2, 2);
        let spec = c.validate().unwrap();
        let cfg = ExperimentConfig {
            n_list: vec![1, 2, 4],
            replications: 4,
            sde_steps: 50,
            ..ExperimentConfig::default()
        };
        let rep = ordering_check(&spec, &cfg).unwrap();
        for r in &rep.records {
            assert_eq!(r.j_mt.mean, rep.mc_value);
            assert_eq!(r.j_mg.mean, rep.mc_value);
        }
        assert!(rep.chain_holds && rep.coincidence_holds && rep.special_case);
        assert_eq!(rep.c, 0.0);
    }
}
