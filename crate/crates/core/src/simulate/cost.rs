//! Cost functionals and their Monte Carlo estimates.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::model::ProblemSpec;
use crate::riccati::RiccatiSolution;
use crate::simulate::engine::{
    run, steps_for, CostWeights, Coupling, Observer, PopulationTrajectory, SimPlan, StepView,
};
use crate::simulate::noise::NoiseBundle;
use crate::strategy::FeedbackLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostTag {
    #[serde(rename = "MG_individual")]
    MgIndividual,
    #[serde(rename = "MT_social")]
    MtSocial,
    #[serde(rename = "MT_per_agent")]
    MtPerAgent,
    #[serde(rename = "MC_limit")]
    McLimit,
}

impl CostTag {
    pub fn name(self) -> &'static str {
        match self {
            CostTag::MgIndividual => "MG_individual",
            CostTag::MtSocial => "MT_social",
            CostTag::MtPerAgent => "MT_per_agent",
            CostTag::McLimit => "MC_limit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub tag: CostTag,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(M)`.
    pub stderr: f64,
    #[serde(rename = "M")]
    pub replications: usize,
}

impl CostEstimate {
    pub fn from_samples(tag: CostTag, samples: &[f64]) -> Result<Self> {
        let m = samples.len();
        if m < 2 {
            return Err(Error::InsufficientReplications(m));
        }
        if samples.iter().all(|&v| v == samples[0]) {
            return Ok(CostEstimate {
                tag,
                mean: samples[0],
                stderr: 0.0,
                replications: m,
            });
        }
        let mean = samples.iter().sum::<f64>() / m as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        Ok(CostEstimate {
            tag,
            mean,
            stderr: (var / m as f64).sqrt(),
            replications: m,
        })
    }
}

/// Per-agent accumulated costs of one replication.
struct CostAccumulator {
    per_agent: Vec<f64>,
    buf: Vec<f64>,
}

impl Observer for CostAccumulator {
    #[inline]
    fn observe(&mut self, plan: &SimPlan, v: &StepView<'_>) {
        let (n, m) = (plan.n, plan.m);
        let w = &plan.weights;
        for (i, acc) in self.per_agent.iter_mut().enumerate() {
            let x = &v.states[i * n..(i + 1) * n];
            if v.terminal {
                *acc += w.terminal(x, v.xbar, &mut self.buf);
            } else {
                *acc += w.running(
                    v.k,
                    x,
                    v.xbar,
                    &v.controls[i * m..(i + 1) * m],
                    &mut self.buf,
                );
            }
        }
    }
}

/// Per-agent costs of one replication for the stream indices `agents`.
pub(crate) fn replication_costs(
    plan: &SimPlan,
    noise: &NoiseBundle,
    rep: usize,
    agents: &[usize],
    coupling: Coupling,
) -> Result<Vec<f64>> {
    let mut acc = CostAccumulator {
        per_agent: vec![0.0; agents.len()],
        buf: vec![0.0; plan.n],
    };
    run(plan, noise, rep, agents, coupling, &mut acc)?;
    Ok(acc.per_agent)
}

/// Runs `0..noise.replications` in parallel, returning results in
/// replication order so downstream reductions do not depend on scheduling.
pub(crate) fn par_replications<T: Send>(
    replications: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..replications).into_par_iter().map(&f).collect();
    results.into_iter().collect()
}

/// Per-replication, per-agent costs of the N-agent system, `N = noise.agents`.
pub fn population_costs(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    noise: &NoiseBundle,
) -> Result<Vec<Vec<f64>>> {
    if noise.agents == 0 {
        return Err(Error::validation("N", "need at least one agent"));
    }
    let plan = SimPlan::new(spec, law, noise.steps)?;
    let agents: Vec<usize> = (0..noise.agents).collect();
    par_replications(noise.replications, |rep| {
        replication_costs(&plan, noise, rep, &agents, Coupling::Empirical)
    })
}

/// Reduces per-agent replication costs to an estimate of `tag`.
pub fn summarize_population(
    costs: &[Vec<f64>],
    agent: usize,
    tag: CostTag,
) -> Result<CostEstimate> {
    let samples: Vec<f64> = costs
        .iter()
        .map(|c| match tag {
            CostTag::MgIndividual => Ok(c[agent]),
            CostTag::MtSocial => Ok(c.iter().sum()),
            CostTag::MtPerAgent => Ok(c.iter().sum::<f64>() / c.len() as f64),
            CostTag::McLimit => Err(Error::validation(
                "tag",
                "MC_limit is not a population cost",
            )),
        })
        .collect::<Result<_>>()?;
    CostEstimate::from_samples(tag, &samples)
}

/// Per-agent costs of stored trajectories, using the same quadrature as the
/// streaming estimator.
pub fn trajectory_costs(spec: &ProblemSpec, traj: &PopulationTrajectory) -> Vec<f64> {
    let steps = traj.steps();
    let w = CostWeights::new(spec, steps);
    let mut buf = vec![0.0; traj.n];
    (0..traj.agents)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..steps {
                acc += w.running(
                    k,
                    traj.state(i, k),
                    traj.xbar(k),
                    traj.control(i, k),
                    &mut buf,
                );
            }
            acc + w.terminal(traj.state(i, steps), traj.xbar(steps), &mut buf)
        })
        .collect()
}

/// Cost estimate over stored replications. `MG_individual` reads agent
/// `agent`; the team tags sum (or average) over the population.
pub fn estimate_cost_population(
    spec: &ProblemSpec,
    trajectories: &[PopulationTrajectory],
    agent: usize,
    tag: CostTag,
) -> Result<CostEstimate> {
    if trajectories.is_empty() {
        return Err(Error::InsufficientReplications(0));
    }
    let costs: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|t| trajectory_costs(spec, t))
        .collect();
    summarize_population(&costs, agent, tag)
}

/// Monte Carlo estimate of the limiting cost of one representative agent.
pub fn estimate_cost_limit(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    replications: usize,
    seed: u64,
    sde_steps: usize,
) -> Result<CostEstimate> {
    let steps = steps_for(spec.dims.horizon, sde_steps);
    let noise = NoiseBundle::new(seed, replications, 1, steps, spec.dims.horizon);
    let plan = SimPlan::new(spec, law, steps)?;
    let samples = par_replications(replications, |rep| {
        replication_costs(&plan, &noise, rep, &[0], Coupling::MeanField).map(|c| c[0])
    })?;
    CostEstimate::from_samples(CostTag::McLimit, &samples)
}

/// `1/2 x0' P2(0) x0`
pub fn mc_value(p2: &RiccatiSolution, x0: &[f64]) -> f64 {
    0.5 * quad_form(p2.p0(), x0)
}
