//! First-order optimality of a law for the limiting control problem, checked
//! by central differences along random control perturbations.
//!
//! Each replication's cost is reduced by a zero-mean martingale: the
//! stochastic integral of the law's own cost-to-go
//! `1/2 y'P y + y'F m + 1/2 m'H m`, `y = x - m`. It removes most of the Monte
//! Carlo noise from the cost differences while leaving every estimate
//! unbiased.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{certify, DEFAULT_OPTIMALITY_REPLICATIONS, DEFAULT_SEED};
use crate::error::Result;
use crate::linalg::FlatMat;
use crate::model::ProblemSpec;
use crate::riccati::{solve_re1, solve_re2, TimeGrid};
use crate::simulate::cost::par_replications;
use crate::simulate::noise::{NoiseBundle, StreamKey};
use crate::simulate::{steps_for, CostEstimate, CostTag, SimPlan, DEFAULT_SDE_STEPS};
use crate::strategy::FeedbackLaw;

/// A bounded perturbation `v` of the control process.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `v = K (x - m)`, row-major `K`.
    Gain { k: Vec<f64> },
    /// `v = a + b sin(2 pi t / T) + c W_i(t)`.
    Path {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationConfig {
    pub directions: usize,
    pub eps: f64,
    #[serde(rename = "M")]
    pub replications: usize,
    pub seed: u64,
    pub sde_steps: usize,
    /// Absolute slack added to the three-standard-error tolerance.
    pub allowance: f64,
    pub eps_reg: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            directions: 5,
            eps: 1e-2,
            replications: DEFAULT_OPTIMALITY_REPLICATIONS,
            seed: DEFAULT_SEED,
            sde_steps: DEFAULT_SDE_STEPS,
            allowance: 1e-4,
            eps_reg: crate::riccati::DEFAULT_EPS_REG,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionResult {
    pub direction: Direction,
    /// Mean of `(J(+eps) - J(-eps)) / (2 eps)`.
    pub derivative: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Means of `J(+eps) - J(0)` and `J(-eps) - J(0)`.
    pub increase: [f64; 2],
    pub increase_stderr: [f64; 2],
    pub convex: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub config: PerturbationConfig,
    pub base_cost: CostEstimate,
    pub results: Vec<DirectionResult>,
    pub pass: bool,
    pub convex: bool,
}

/// `count` directions alternating gain-type and path-type, entries uniform
/// in `[-1, 1]`.
pub fn random_directions(n: usize, m: usize, count: usize, seed: u64) -> Vec<Direction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut draw =
        |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                Direction::Gain { k: draw(m * n) }
            } else {
                Direction::Path {
                    a: draw(m),
                    b: draw(m),
                    c: draw(m),
                }
            }
        })
        .collect()
}

/// Conditional cost-to-go of one limit agent under a fixed law, as
/// `1/2 y'P y + y'F m + 1/2 m'H m` on the law's grid. It solves linear
/// backward equations; for an optimal law `P = P1` and `H = P2`.
#[derive(Debug, Clone)]
pub struct LawValue {
    pub grid: TimeGrid,
    pub p: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
}

impl LawValue {
    fn at(&self, t: f64) -> [FlatMat; 3] {
        let (k, w) = self.grid.locate(t);
        let lerp = |v: &[DMatrix<f64>]| FlatMat::from_dmatrix(&(&v[k] * (1.0 - w) + &v[k + 1] * w));
        [lerp(&self.p), lerp(&self.f), lerp(&self.h)]
    }
}

type Triple = [DMatrix<f64>; 3];

fn law_value_rhs(spec: &ProblemSpec, law: &FeedbackLaw, t: f64, v: &Triple) -> Triple {
    let s = spec.snapshot(t);
    let (tm, td) = law.gains_at(t);
    let n = spec.dims.n;
    let [p, f, h] = v;
    let a = &s.a + &s.b * &td;
    let c = &s.c + &s.d * &td;
    let c0 = &s.c0 + &s.d0 * &td;
    let sm = &s.c + &s.c_bar + (&s.d + &s.d_bar) * &tm;
    let am = &s.a + &s.a_bar + (&s.b + &s.b_bar) * &tm;
    let cm0 = &s.c0 + &s.c0_bar + (&s.d0 + &s.d0_bar) * &tm;
    let e1 = DMatrix::identity(n, n) - &s.gamma1;
    let pc = p * &c;
    let dp = a.transpose() * p
        + p * &a
        + c.transpose() * &pc
        + c0.transpose() * p * &c0
        + &s.q
        + td.transpose() * &s.r * &td;
    let df = a.transpose() * f
        + f * &am
        + c0.transpose() * f * &cm0
        + pc.transpose() * &sm
        + &s.q * &e1
        + td.transpose() * &s.r * &tm;
    let dh = am.transpose() * h
        + h * &am
        + cm0.transpose() * h * &cm0
        + sm.transpose() * p * &sm
        + e1.transpose() * &s.q * &e1
        + tm.transpose() * &s.r * &tm;
    [-dp, -df, -dh]
}

/// Backward RK4 for the law's cost-to-go coefficients.
pub fn law_value(spec: &ProblemSpec, law: &FeedbackLaw) -> LawValue {
    let grid = law.grid;
    let n = spec.dims.n;
    let g = &spec.weights.g;
    let e2 = DMatrix::identity(n, n) - &spec.weights.gamma2;
    let mut v: Triple = [g.clone(), g * &e2, e2.transpose() * g * &e2];
    let mut out = vec![v.clone()];
    let h = grid.dt();
    let axpy = |v: &Triple, k: &Triple, w: f64| -> Triple {
        [&v[0] + &k[0] * w, &v[1] + &k[1] * w, &v[2] + &k[2] * w]
    };
    for step in (0..grid.steps).rev() {
        let t1 = grid.node(step + 1);
        let tm = t1 - 0.5 * h;
        let k1 = law_value_rhs(spec, law, t1, &v);
        let k2 = law_value_rhs(spec, law, tm, &axpy(&v, &k1, -0.5 * h));
        let k3 = law_value_rhs(spec, law, tm, &axpy(&v, &k2, -0.5 * h));
        let k4 = law_value_rhs(spec, law, grid.node(step), &axpy(&v, &k3, -h));
        let mut next = v.clone();
        for i in 0..3 {
            next[i] -= (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0);
        }
        v = next;
        out.push(v.clone());
    }
    out.reverse();
    let mut value = LawValue {
        grid,
        p: Vec::with_capacity(out.len()),
        f: Vec::with_capacity(out.len()),
        h: Vec::with_capacity(out.len()),
    };
    for [p, f, h] in out {
        value.p.push(p);
        value.f.push(f);
        value.h.push(h);
    }
    value
}

struct Context<'a> {
    plan: &'a SimPlan,
    noise: NoiseBundle,
    /// `[P, F, H]` at each simulation step.
    value: Vec<[FlatMat; 3]>,
    horizon: f64,
}

/// Cost of one replication under `u + eps v`, minus the control variate.
fn perturbed_cost(ctx: &Context<'_>, dir: Option<&Direction>, eps: f64, rep: usize) -> f64 {
    let plan = ctx.plan;
    let (n, m, dt) = (plan.n, plan.m, plan.dt);
    let gain = match dir {
        Some(Direction::Gain { k }) => Some(FlatMat {
            rows: m,
            cols: n,
            data: k.clone(),
        }),
        _ => None,
    };
    let mut w0 = ctx.noise.stream(rep, StreamKey::Common);
    let mut wi = ctx.noise.stream(rep, StreamKey::Agent(0));

    let mut x = plan.x0.clone();
    let mut mean = plan.x0.clone();
    let mut y = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut w = vec![0.0; m];
    let mut dv = vec![0.0; m];
    let mut sig_i = vec![0.0; n];
    let mut sig_0 = vec![0.0; n];
    let mut sig_m0 = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut mdrift = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut brownian = 0.0;
    let mut cost = 0.0;
    let mut z = 0.0;

    for k in 0..plan.steps {
        let c = &plan.coeffs[k];
        let t = plan.time(k);
        for j in 0..n {
            y[j] = x[j] - mean[j];
        }
        dv.iter_mut().for_each(|v| *v = 0.0);
        if let Some(Direction::Path { a, b, c: cw }) = dir {
            let s = (TAU * t / ctx.horizon).sin();
            for j in 0..m {
                dv[j] = eps * (a[j] + b[j] * s);
            }
            u.iter_mut()
                .zip(cw)
                .for_each(|(uj, cj)| *uj = eps * cj * brownian);
        } else {
            u.iter_mut().for_each(|v| *v = 0.0);
        }
        w.copy_from_slice(&dv);
        c.theta_mean.mul_add(&mean, 1.0, &mut w);
        for j in 0..m {
            u[j] += w[j];
        }
        c.theta_dev.mul_add(&y, 1.0, &mut u);
        if let Some(g) = &gain {
            g.mul_add(&y, eps, &mut u);
        }
        cost += plan.weights.running(k, &x, &mean, &u, &mut buf);

        let dw0 = w0.next_increment();
        let dwi = wi.next_increment();
        for v in [&mut sig_i, &mut sig_0, &mut sig_m0, &mut drift, &mut mdrift] {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        c.c.mul_add(&x, 1.0, &mut sig_i);
        c.c_bar.mul_add(&mean, 1.0, &mut sig_i);
        c.d.mul_add(&u, 1.0, &mut sig_i);
        c.d_bar.mul_add(&w, 1.0, &mut sig_i);
        c.c0.mul_add(&x, 1.0, &mut sig_0);
        c.c0_bar.mul_add(&mean, 1.0, &mut sig_0);
        c.d0.mul_add(&u, 1.0, &mut sig_0);
        c.d0_bar.mul_add(&w, 1.0, &mut sig_0);
        c.c0.mul_add(&mean, 1.0, &mut sig_m0);
        c.c0_bar.mul_add(&mean, 1.0, &mut sig_m0);
        c.d0.mul_add(&w, 1.0, &mut sig_m0);
        c.d0_bar.mul_add(&w, 1.0, &mut sig_m0);
        c.a.mul_add(&x, 1.0, &mut drift);
        c.a_bar.mul_add(&mean, 1.0, &mut drift);
        c.b.mul_add(&u, 1.0, &mut drift);
        c.b_bar.mul_add(&w, 1.0, &mut drift);
        c.a.mul_add(&mean, 1.0, &mut mdrift);
        c.a_bar.mul_add(&mean, 1.0, &mut mdrift);
        c.b.mul_add(&w, 1.0, &mut mdrift);
        c.b_bar.mul_add(&w, 1.0, &mut mdrift);

        // Martingale increments of the cost-to-go.
        let [p, f, h] = &ctx.value[k];
        for j in 0..n {
            buf[j] = sig_0[j] - sig_m0[j];
        }
        let dy = |v: &[f64]| p.bilinear(&y, v) + f.bilinear(v, &mean);
        z += dy(&sig_i) * dwi
            + (dy(&buf) + f.bilinear(&y, &sig_m0) + h.bilinear(&mean, &sig_m0)) * dw0;

        for j in 0..n {
            x[j] += drift[j] * dt + sig_i[j] * dwi + sig_0[j] * dw0;
            mean[j] += mdrift[j] * dt + sig_m0[j] * dw0;
        }
        brownian += dwi;
    }
    cost += plan.weights.terminal(&x, &mean, &mut buf);
    cost - z
}

fn direction_dims_ok(dir: &Direction, n: usize, m: usize) -> bool {
    match dir {
        Direction::Gain { k } => k.len() == m * n,
        Direction::Path { a, b, c } => a.len() == m && b.len() == m && c.len() == m,
    }
}

/// Central-difference check along `directions`.
pub fn perturbation_along(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    directions: &[Direction],
    cfg: &PerturbationConfig,
) -> Result<PerturbationReport> {
    let (n, m) = (spec.dims.n, spec.dims.m);
    if let Some(bad) = directions.iter().find(|d| !direction_dims_ok(d, n, m)) {
        return Err(crate::error::Error::validation(
            "direction",
            format!("shape does not match n = {n}, m = {m}: {bad:?}"),
        ));
    }
    let grid = TimeGrid::new(spec.dims.horizon, law.grid.steps);
    let p1 = solve_re1(spec, grid)?;
    let p2 = solve_re2(spec, grid, &p1)?;
    certify(&[&p1, &p2], cfg.eps_reg)?;
    let steps = steps_for(spec.dims.horizon, cfg.sde_steps);
    let plan = SimPlan::new(spec, law, steps)?;
    let value = law_value(spec, law);
    let ctx = Context {
        plan: &plan,
        noise: NoiseBundle::new(cfg.seed, cfg.replications, 1, steps, spec.dims.horizon),
        value: (0..steps).map(|k| value.at(plan.time(k))).collect(),
        horizon: spec.dims.horizon,
    };
    let eps = cfg.eps;
    let rows = par_replications(cfg.replications, |rep| {
        let base = perturbed_cost(&ctx, None, 0.0, rep);
        let pm: Vec<(f64, f64)> = if eps == 0.0 {
            directions.iter().map(|_| (base, base)).collect()
        } else {
            directions
                .iter()
                .map(|d| {
                    (
                        perturbed_cost(&ctx, Some(d), eps, rep),
                        perturbed_cost(&ctx, Some(d), -eps, rep),
                    )
                })
                .collect()
        };
        Ok((base, pm))
    })?;

    let base: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let base_cost = CostEstimate::from_samples(CostTag::McLimit, &base)?;
    let mut results = Vec::with_capacity(directions.len());
    for (i, dir) in directions.iter().enumerate() {
        let (derivative, stderr) = if eps == 0.0 {
            (0.0, 0.0)
        } else {
            let d: Vec<f64> = rows
                .iter()
                .map(|r| (r.1[i].0 - r.1[i].1) / (2.0 * eps))
                .collect();
            let e = CostEstimate::from_samples(CostTag::McLimit, &d)?;
            (e.mean, e.stderr)
        };
        let plus: Vec<f64> = rows.iter().map(|r| r.1[i].0 - r.0).collect();
        let minus: Vec<f64> = rows.iter().map(|r| r.1[i].1 - r.0).collect();
        let ep = CostEstimate::from_samples(CostTag::McLimit, &plus)?;
        let em = CostEstimate::from_samples(CostTag::McLimit, &minus)?;
        let tolerance = 3.0 * stderr + cfg.allowance;
        let convex = ep.mean >= -(3.0 * ep.stderr + cfg.allowance)
            && em.mean >= -(3.0 * em.stderr + cfg.allowance);
        results.push(DirectionResult {
            direction: dir.clone(),
            derivative,
            stderr,
            tolerance,
            pass: derivative.abs() <= tolerance,
            increase: [ep.mean, em.mean],
            increase_stderr: [ep.stderr, em.stderr],
            convex,
        });
    }
    Ok(PerturbationReport {
        config: cfg.clone(),
        base_cost,
        pass: results.iter().all(|r| r.pass),
        convex: results.iter().all(|r| r.convex),
        results,
    })
}

/// Central-difference check along `cfg.directions` random directions.
pub fn perturbation_optimality(
    spec: &ProblemSpec,
    law: &FeedbackLaw,
    cfg: &PerturbationConfig,
) -> Result<PerturbationReport> {
    let dirs = random_directions(spec.dims.n, spec.dims.m, cfg.directions, cfg.seed);
    perturbation_along(spec, law, &dirs, cfg)
}
