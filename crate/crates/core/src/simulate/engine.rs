//! Euler-Maruyama stepping of the conditional-mean process, the coupled
//! N-agent system and the mean-field limit.

use crate::error::{Error, Result};
use crate::linalg::FlatMat;
use crate::model::ProblemSpec;
use crate::simulate::noise::{GaussianStream, NoiseBundle, StreamKey};
use crate::strategy::FeedbackLaw;

pub const STATE_GUARD: f64 = 1e12;

/// Cost weights sampled on the simulation grid.
#[derive(Debug, Clone)]
pub(crate) struct CostWeights {
    pub dt: f64,
    pub q: Vec<FlatMat>,
    pub r: Vec<FlatMat>,
    pub gamma1: Vec<FlatMat>,
    pub g: FlatMat,
    pub gamma2: FlatMat,
}

impl CostWeights {
    pub fn new(spec: &ProblemSpec, steps: usize) -> Self {
        let dt = spec.dims.horizon / steps as f64;
        let w = &spec.weights;
        let sample = |s: &crate::model::MatrixSchedule| -> Vec<FlatMat> {
            (0..steps)
                .map(|k| FlatMat::from_dmatrix(s.at(k as f64 * dt)))
                .collect()
        };
        CostWeights {
            dt,
            q: sample(&w.q),
            r: sample(&w.r),
            gamma1: sample(&w.gamma1),
            g: FlatMat::from_dmatrix(&w.g),
            gamma2: FlatMat::from_dmatrix(&w.gamma2),
        }
    }

    /// `dt * 1/2 (|x - Gamma1 xbar|_Q^2 + |u|_R^2)` at step `k`.
    #[inline]
    pub fn running(&self, k: usize, x: &[f64], xbar: &[f64], u: &[f64], buf: &mut [f64]) -> f64 {
        buf.copy_from_slice(x);
        self.gamma1[k].mul_add(xbar, -1.0, buf);
        0.5 * self.dt * (self.q[k].quad_form(buf) + self.r[k].quad_form(u))
    }

    /// `1/2 |x(T) - Gamma2 xbar(T)|_G^2`
    #[inline]
    pub fn terminal(&self, x: &[f64], xbar: &[f64], buf: &mut [f64]) -> f64 {
        buf.copy_from_slice(x);
        self.gamma2.mul_add(xbar, -1.0, buf);
        0.5 * self.g.quad_form(buf)
    }
}

/// Coefficients and gains at one simulation step.
#[derive(Debug, Clone)]
pub(crate) struct StepCoeffs {
    pub a: FlatMat,
    pub a_bar: FlatMat,
    pub b: FlatMat,
    pub b_bar: FlatMat,
    pub c: FlatMat,
    pub c_bar: FlatMat,
    pub d: FlatMat,
    pub d_bar: FlatMat,
    pub c0: FlatMat,
    pub c0_bar: FlatMat,
    pub d0: FlatMat,
    pub d0_bar: FlatMat,
    pub theta_mean: FlatMat,
    pub theta_dev: FlatMat,
    /// `A_cal + B_cal theta_mean`
    pub mean_drift: FlatMat,
    /// `C0_cal + D0_cal theta_mean`
    pub mean_diff0: FlatMat,
}

/// Everything a replication needs, shared read-only across threads.
#[derive(Debug, Clone)]
pub struct SimPlan {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub(crate) coeffs: Vec<StepCoeffs>,
    pub(crate) weights: CostWeights,
}

impl SimPlan {
    pub fn new(spec: &ProblemSpec, law: &FeedbackLaw, steps: usize) -> Result<Self> {
        if (law.grid.horizon - spec.dims.horizon).abs() > 1e-12 * spec.dims.horizon {
            return Err(Error::GridMismatch(format!(
                "law horizon {} vs problem horizon {}",
                law.grid.horizon, spec.dims.horizon
            )));
        }
        if steps == 0 {
            return Err(Error::validation("sde_steps", "must be positive"));
        }
        let dt = spec.dims.horizon / steps as f64;
        let f = FlatMat::from_dmatrix;
        let coeffs = (0..=steps)
            .map(|k| {
                let t = k as f64 * dt;
                let s = spec.snapshot(t);
                let (tm, td) = law.gains_at(t);
                StepCoeffs {
                    a: f(&s.a),
                    a_bar: f(&s.a_bar),
                    b: f(&s.b),
                    b_bar: f(&s.b_bar),
                    c: f(&s.c),
                    c_bar: f(&s.c_bar),
                    d: f(&s.d),
                    d_bar: f(&s.d_bar),
                    c0: f(&s.c0),
                    c0_bar: f(&s.c0_bar),
                    d0: f(&s.d0),
                    d0_bar: f(&s.d0_bar),
                    mean_drift: f(&(&s.a_cal + &s.b_cal * &tm)),
                    mean_diff0: f(&(&s.c0_cal + &s.d0_cal * &tm)),
                    theta_mean: f(&tm),
                    theta_dev: f(&td),
                }
            })
            .collect();
        Ok(SimPlan {
            n: spec.dims.n,
            m: spec.dims.m,
            steps,
            dt,
            x0: spec.x0.clone(),
            coeffs,
            weights: CostWeights::new(spec, steps),
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// One Euler-Maruyama step of the conditional mean.
    #[inline]
    pub(crate) fn mean_step(&self, k: usize, m: &[f64], dw0: f64, out: &mut [f64]) {
        out.copy_from_slice(m);
        let c = &self.coeffs[k];
        c.mean_drift.mul_add(m, self.dt, out);
        c.mean_diff0.mul_add(m, dw0, out);
    }
}

/// Steps number of a `sde_steps`-per-unit-time grid on `[0, T]`.
pub fn steps_for(horizon: f64, sde_steps: usize) -> usize {
    ((sde_steps as f64 * horizon).round() as usize).max(1)
}

/// How the agents see the population aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Finite population: empirical averages of states and controls.
    Empirical,
    /// Mean-field limit: the conditional mean and its control.
    MeanField,
}

/// State of the population at one grid time, before stepping.
pub(crate) struct StepView<'a> {
    pub k: usize,
    pub terminal: bool,
    pub states: &'a [f64],
    pub controls: &'a [f64],
    pub xbar: &'a [f64],
    pub ubar: &'a [f64],
    pub mean: &'a [f64],
    pub dw0: f64,
}

pub(crate) trait Observer {
    fn observe(&mut self, plan: &SimPlan, view: &StepView<'_>);
}

fn guard(values: &[f64], context: &'static str, time: f64) -> Result<()> {
    let norm = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if !(norm <= STATE_GUARD) {
        return Err(Error::Blowup {
            context,
            time,
            norm,
        });
    }
    Ok(())
}

/// Runs one replication for the agents `agents` (stream indices) and feeds
/// every grid time to `obs`.
pub(crate) fn run<O: Observer>(
    plan: &SimPlan,
    noise: &NoiseBundle,
    rep: usize,
    agents: &[usize],
    coupling: Coupling,
    obs: &mut O,
) -> Result<()> {
    let (n, m, dt) = (plan.n, plan.m, plan.dt);
    let count = agents.len();
    assert!(count >= 1, "need at least one agent");
    assert_eq!(noise.steps, plan.steps, "noise and plan grids differ");
    let mut w0 = noise.stream(rep, StreamKey::Common);
    let mut streams: Vec<GaussianStream> = agents
        .iter()
        .map(|&i| noise.stream(rep, StreamKey::Agent(i)))
        .collect();

    let mut x: Vec<f64> = plan.x0.iter().copied().cycle().take(count * n).collect();
    let mut u = vec![0.0; count * m];
    let mut mean = plan.x0.clone();
    let mut mean_next = vec![0.0; n];
    let mut xbar = vec![0.0; n];
    let mut ubar = vec![0.0; m];
    let mut u_off = vec![0.0; m];
    let mut dw = vec![0.0; count];
    let mut common_drift = vec![0.0; n];
    let mut common_diff = vec![0.0; n];
    let mut common_diff0 = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let inv = 1.0 / count as f64;

    for k in 0..=plan.steps {
        let terminal = k == plan.steps;
        let c = &plan.coeffs[k];
        // u_i = theta_dev x_i + (theta_mean - theta_dev) m
        u_off.iter_mut().for_each(|v| *v = 0.0);
        c.theta_mean.mul_add(&mean, 1.0, &mut u_off);
        c.theta_dev.mul_add(&mean, -1.0, &mut u_off);
        for i in 0..count {
            let ui = &mut u[i * m..(i + 1) * m];
            ui.copy_from_slice(&u_off);
            c.theta_dev.mul_add(&x[i * n..(i + 1) * n], 1.0, ui);
        }
        match coupling {
            Coupling::Empirical => {
                xbar.iter_mut().for_each(|v| *v = 0.0);
                ubar.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..count {
                    for (s, v) in xbar.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                        *s += v;
                    }
                    for (s, v) in ubar.iter_mut().zip(&u[i * m..(i + 1) * m]) {
                        *s += v;
                    }
                }
                xbar.iter_mut().for_each(|v| *v *= inv);
                ubar.iter_mut().for_each(|v| *v *= inv);
            }
            Coupling::MeanField => {
                xbar.copy_from_slice(&mean);
                ubar.iter_mut().for_each(|v| *v = 0.0);
                c.theta_mean.mul_add(&mean, 1.0, &mut ubar);
            }
        }
        let dw0 = if terminal { 0.0 } else { w0.next_increment() };
        for (d, s) in dw.iter_mut().zip(streams.iter_mut()) {
            *d = if terminal { 0.0 } else { s.next_increment() };
        }
        obs.observe(
            plan,
            &StepView {
                k,
                terminal,
                states: &x,
                controls: &u,
                xbar: &xbar,
                ubar: &ubar,
                mean: &mean,
                dw0,
            },
        );
        if terminal {
            break;
        }

        for v in [&mut common_drift, &mut common_diff, &mut common_diff0] {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        c.a_bar.mul_add(&xbar, 1.0, &mut common_drift);
        c.b_bar.mul_add(&ubar, 1.0, &mut common_drift);
        c.c_bar.mul_add(&xbar, 1.0, &mut common_diff);
        c.d_bar.mul_add(&ubar, 1.0, &mut common_diff);
        c.c0_bar.mul_add(&xbar, 1.0, &mut common_diff0);
        c.d0_bar.mul_add(&ubar, 1.0, &mut common_diff0);

        for i in 0..count {
            let dwi = dw[i];
            let (xs, us) = (i * n..(i + 1) * n, i * m..(i + 1) * m);
            xi.copy_from_slice(&x[xs.clone()]);
            let ui = &u[us];
            let out = &mut x[xs];
            for j in 0..n {
                out[j] += common_drift[j] * dt + common_diff[j] * dwi + common_diff0[j] * dw0;
            }
            c.a.mul_add(&xi, dt, out);
            c.b.mul_add(ui, dt, out);
            c.c.mul_add(&xi, dwi, out);
            c.d.mul_add(ui, dwi, out);
            c.c0.mul_add(&xi, dw0, out);
            c.d0.mul_add(ui, dw0, out);
        }
        plan.mean_step(k, &mean, dw0, &mut mean_next);
        std::mem::swap(&mut mean, &mut mean_next);
        let t = plan.time(k + 1);
        guard(&x, "agent state", t)?;
        guard(&mean, "conditional mean", t)?;
    }
    Ok(())
}

/// Euler-Maruyama path of the conditional mean along one common-noise path.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanProcessPath {
    pub n: usize,
    /// Flattened `(steps + 1) x n` values.
    pub values: Vec<f64>,
    /// Common-noise increments the path was driven by.
    pub w0: Vec<f64>,
}

impl MeanProcessPath {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.values.len() / self.n - 1)
    }
}

/// Integrates `dm = (A_cal + B_cal theta_mean) m dt + (C0_cal + D0_cal theta_mean) m dW0`
/// from `m(0) = x0` over the increments `w0`.
pub fn simulate_mean_process(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    w0: &[f64],
) -> Result<MeanProcessPath> {
    let plan = SimPlan::new(spec, law, w0.len())?;
    Ok(mean_path(&plan, w0))
}

pub(crate) fn mean_path(plan: &SimPlan, w0: &[f64]) -> MeanProcessPath {
    let n = plan.n;
    let mut values = Vec::with_capacity((plan.steps + 1) * n);
    values.extend_from_slice(&plan.x0);
    let mut cur = plan.x0.clone();
    let mut next = vec![0.0; n];
    for (k, &dw0) in w0.iter().enumerate() {
        plan.mean_step(k, &cur, dw0, &mut next);
        std::mem::swap(&mut cur, &mut next);
        values.extend_from_slice(&cur);
    }
    MeanProcessPath {
        n,
        values,
        w0: w0.to_vec(),
    }
}

/// Recorded paths of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTrajectory {
    pub n: usize,
    pub m: usize,
    pub agents: usize,
    pub times: Vec<f64>,
    /// Per agent, flattened `(steps + 1) x n`.
    pub states: Vec<Vec<f64>>,
    /// Per agent, flattened `(steps + 1) x m`.
    pub controls: Vec<Vec<f64>>,
    pub empirical_mean: Vec<f64>,
    pub control_mean: Vec<f64>,
    pub mean_process: MeanProcessPath,
}

impl PopulationTrajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, agent: usize, k: usize) -> &[f64] {
        &self.states[agent][k * self.n..(k + 1) * self.n]
    }

    pub fn control(&self, agent: usize, k: usize) -> &[f64] {
        &self.controls[agent][k * self.m..(k + 1) * self.m]
    }

    pub fn xbar(&self, k: usize) -> &[f64] {
        &self.empirical_mean[k * self.n..(k + 1) * self.n]
    }

    pub fn ubar(&self, k: usize) -> &[f64] {
        &self.control_mean[k * self.m..(k + 1) * self.m]
    }
}

struct Recorder {
    traj: PopulationTrajectory,
}

impl Observer for Recorder {
    fn observe(&mut self, plan: &SimPlan, v: &StepView<'_>) {
        let t = &mut self.traj;
        let (n, m) = (t.n, t.m);
        t.times.push(plan.time(v.k));
        for i in 0..t.agents {
            t.states[i].extend_from_slice(&v.states[i * n..(i + 1) * n]);
            t.controls[i].extend_from_slice(&v.controls[i * m..(i + 1) * m]);
        }
        t.empirical_mean.extend_from_slice(v.xbar);
        t.control_mean.extend_from_slice(v.ubar);
        t.mean_process.values.extend_from_slice(v.mean);
        if !v.terminal {
            t.mean_process.w0.push(v.dw0);
        }
    }
}

pub(crate) fn record(
    plan: &SimPlan,
    noise: &NoiseBundle,
    rep: usize,
    agents: &[usize],
    coupling: Coupling,
) -> Result<PopulationTrajectory> {
    let count = agents.len();
    let mut rec = Recorder {
        traj: PopulationTrajectory {
            n: plan.n,
            m: plan.m,
            agents: count,
            times: Vec::with_capacity(plan.steps + 1),
            states: vec![Vec::with_capacity((plan.steps + 1) * plan.n); count],
            controls: vec![Vec::with_capacity((plan.steps + 1) * plan.m); count],
            empirical_mean: Vec::new(),
            control_mean: Vec::new(),
            mean_process: MeanProcessPath {
                n: plan.n,
                values: Vec::new(),
                w0: Vec::new(),
            },
        },
    };
    run(plan, noise, rep, agents, coupling, &mut rec)?;
    Ok(rec.traj)
}

/// One replication of the N-agent system, `N = noise.agents`.
pub fn simulate_population(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    noise: &NoiseBundle,
    replication: usize,
) -> Result<PopulationTrajectory> {
    if noise.agents == 0 {
        return Err(Error::validation("N", "need at least one agent"));
    }
    let plan = SimPlan::new(spec, law, noise.steps)?;
    let agents: Vec<usize> = (0..noise.agents).collect();
    record(&plan, noise, replication, &agents, Coupling::Empirical)
}

/// Single agent of the mean-field limit, driven by its own stream `agent`
/// and the replication's common noise.
pub fn simulate_limit(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    noise: &NoiseBundle,
    replication: usize,
    agent: usize,
) -> Result<PopulationTrajectory> {
    let plan = SimPlan::new(spec, law, noise.steps)?;
    record(&plan, noise, replication, &[agent], Coupling::MeanField)
}

/// Limit agents `0..count` sharing one common-noise path.
pub fn simulate_limit_agents(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    noise: &NoiseBundle,
    replication: usize,
    count: usize,
) -> Result<PopulationTrajectory> {
    let plan = SimPlan::new(spec, law, noise.steps)?;
    let agents: Vec<usize> = (0..count).collect();
    record(&plan, noise, replication, &agents, Coupling::MeanField)
}
