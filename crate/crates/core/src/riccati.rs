//! Backward RK4 integration of the three Riccati equations.
//!
//! `P1` drives the deviation gain, `P2` the mean gain of the control/team
//! problem and the asymmetric `P3` the mean gain of the game. `P2` and `P3`
//! need `P1` between grid nodes; it is reconstructed by cubic Hermite
//! interpolation from stored nodal values and derivatives, which keeps the
//! coupled scheme fourth order.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_norm, min_sym_eigenvalue, solve_gain, symmetric_part};
use crate::model::{ProblemSpec, Snapshot};

pub const DEFAULT_EPS_REG: f64 = 1e-6;
pub const BLOWUP_GUARD: f64 = 1e12;

/// Uniform grid `t_k = k T / steps`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        assert!(steps >= 1 && horizon > 0.0);
        TimeGrid { horizon, steps }
    }

    pub fn for_spec(spec: &ProblemSpec) -> Self {
        Self::new(spec.dims.horizon, spec.dims.n_t)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    pub fn refined(&self) -> Self {
        Self::new(self.horizon, 2 * self.steps)
    }

    /// Interval index and fractional position of `t`, clamped to `[0, T]`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt()).clamp(0.0, self.steps as f64);
        let k = (s.floor() as usize).min(self.steps - 1);
        (k, s - k as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RiccatiTag {
    RE1,
    RE2,
    RE3,
}

impl RiccatiTag {
    pub fn name(self) -> &'static str {
        match self {
            RiccatiTag::RE1 => "RE1",
            RiccatiTag::RE2 => "RE2",
            RiccatiTag::RE3 => "RE3",
        }
    }

    pub fn operator_name(self) -> &'static str {
        match self {
            RiccatiTag::RE1 => "R1",
            RiccatiTag::RE2 => "R2",
            RiccatiTag::RE3 => "R3",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub tag: RiccatiTag,
    pub grid: TimeGrid,
    pub p: Vec<DMatrix<f64>>,
    /// The gain operator matched to the tag, per node.
    pub r_op: Vec<DMatrix<f64>>,
    /// Smallest eigenvalue of the symmetric part of `r_op`, per node.
    pub min_eig: Vec<f64>,
    /// `min_eig >= DEFAULT_EPS_REG` at every node.
    pub regular: bool,
    /// Max-norm change of `P` at shared nodes when re-solved on `2 * steps`.
    pub step_halving_error: f64,
    /// `dP/dt` per node; used to interpolate `P1` inside RK4 steps.
    pub(crate) dp: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Linear interpolation of `P` between nodes.
    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let (k, f) = self.grid.locate(t);
        &self.p[k] * (1.0 - f) + &self.p[k + 1] * f
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p[0]
    }

    /// Cubic Hermite value of `P` at fraction `f` of interval `k`.
    fn hermite(&self, k: usize, f: f64) -> DMatrix<f64> {
        let h = self.grid.dt();
        let (f2, f3) = (f * f, f * f * f);
        let h00 = 2.0 * f3 - 3.0 * f2 + 1.0;
        let h10 = f3 - 2.0 * f2 + f;
        let h01 = -2.0 * f3 + 3.0 * f2;
        let h11 = f3 - f2;
        &self.p[k] * h00
            + &self.dp[k] * (h10 * h)
            + &self.p[k + 1] * h01
            + &self.dp[k + 1] * (h11 * h)
    }
}

/// Value of `P1` at an RK4 stage inside step `k` (fraction 0, 1/2 or 1).
fn p1_stage(p1: &RiccatiSolution, k: usize, f: f64) -> DMatrix<f64> {
    if f == 0.0 {
        p1.p[k].clone()
    } else if f == 1.0 {
        p1.p[k + 1].clone()
    } else {
        p1.hermite(k, f)
    }
}

/// Right-hand side `dP/dt` plus the gain operator, for one tag.
fn rhs(
    tag: RiccatiTag,
    s: &Snapshot,
    p: &DMatrix<f64>,
    p1: Option<&DMatrix<f64>>,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match tag {
        RiccatiTag::RE1 => {
            let r_op = gain_operator(tag, s, p, p);
            let right = right_factor(tag, s, p, p);
            let left = p * &s.b + s.c.transpose() * p * &s.d + s.c0.transpose() * p * &s.d0;
            let x = solve_gain(&r_op, &right, true, tag.operator_name(), t)?;
            let lin = p * &s.a
                + s.a.transpose() * p
                + s.c.transpose() * p * &s.c
                + s.c0.transpose() * p * &s.c0
                + &s.q;
            Ok((-(lin - left * x), r_op))
        }
        RiccatiTag::RE2 => {
            let p1 = p1.expect("RE2 needs P1");
            let r_op = gain_operator(tag, s, p, p1);
            let right = right_factor(tag, s, p, p1);
            let left = p * &s.b_cal
                + s.c_cal.transpose() * p1 * &s.d_cal
                + s.c0_cal.transpose() * p * &s.d0_cal;
            let x = solve_gain(&r_op, &right, true, tag.operator_name(), t)?;
            let lin = p * &s.a_cal
                + s.a_cal.transpose() * p
                + s.c_cal.transpose() * p1 * &s.c_cal
                + s.c0_cal.transpose() * p * &s.c0_cal
                + &s.q_hat;
            Ok((-(lin - left * x), r_op))
        }
        RiccatiTag::RE3 => {
            let p1 = p1.expect("RE3 needs P1");
            let r_op = gain_operator(tag, s, p, p1);
            let right = right_factor(tag, s, p, p1);
            let left =
                p * &s.b_cal + s.c.transpose() * p1 * &s.d_cal + s.c0.transpose() * p * &s.d0_cal;
            let x = solve_gain(&r_op, &right, false, tag.operator_name(), t)?;
            let lin = p * &s.a_cal
                + s.a.transpose() * p
                + s.c.transpose() * p1 * &s.c_cal
                + s.c0.transpose() * p * &s.c0_cal
                + &s.q
                - &s.q * &s.gamma1;
            Ok((-(lin - left * x), r_op))
        }
    }
}

/// `R1 = D'P1 D + D0'P1 D0 + R`, `R2 = Dc'P1 Dc + D0c'P2 D0c + R`,
/// `R3 = D'P1 Dc + D0'P3 D0c + R`.
fn gain_operator(
    tag: RiccatiTag,
    s: &Snapshot,
    p: &DMatrix<f64>,
    p1: &DMatrix<f64>,
) -> DMatrix<f64> {
    match tag {
        RiccatiTag::RE1 => s.d.transpose() * p * &s.d + s.d0.transpose() * p * &s.d0 + &s.r,
        RiccatiTag::RE2 => {
            s.d_cal.transpose() * p1 * &s.d_cal + s.d0_cal.transpose() * p * &s.d0_cal + &s.r
        }
        RiccatiTag::RE3 => {
            s.d.transpose() * p1 * &s.d_cal + s.d0.transpose() * p * &s.d0_cal + &s.r
        }
    }
}

/// The `m x n` factor whose image under the inverse gain operator is the
/// (negated) feedback gain.
fn right_factor(
    tag: RiccatiTag,
    s: &Snapshot,
    p: &DMatrix<f64>,
    p1: &DMatrix<f64>,
) -> DMatrix<f64> {
    match tag {
        RiccatiTag::RE1 => {
            s.b.transpose() * p + s.d.transpose() * p * &s.c + s.d0.transpose() * p * &s.c0
        }
        RiccatiTag::RE2 => {
            s.b_cal.transpose() * p
                + s.d_cal.transpose() * p1 * &s.c_cal
                + s.d0_cal.transpose() * p * &s.c0_cal
        }
        RiccatiTag::RE3 => {
            s.b.transpose() * p + s.d.transpose() * p1 * &s.c_cal + s.d0.transpose() * p * &s.c0_cal
        }
    }
}

/// Feedback gain `-R_op^{-1} * right` at one node, plus the right factor.
pub(crate) fn node_gain(
    tag: RiccatiTag,
    s: &Snapshot,
    p: &DMatrix<f64>,
    p1: &DMatrix<f64>,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let r_op = gain_operator(tag, s, p, p1);
    let right = right_factor(tag, s, p, p1);
    let x = solve_gain(
        &r_op,
        &right,
        tag != RiccatiTag::RE3,
        tag.operator_name(),
        t,
    )?;
    Ok((-x, r_op, right))
}

fn terminal(tag: RiccatiTag, spec: &ProblemSpec) -> DMatrix<f64> {
    let w = &spec.weights;
    let n = spec.dims.n;
    let k = DMatrix::identity(n, n) - &w.gamma2;
    match tag {
        RiccatiTag::RE1 => w.g.clone(),
        RiccatiTag::RE2 => symmetric_part(&(k.transpose() * &w.g * &k)),
        RiccatiTag::RE3 => &w.g * k,
    }
}

fn guard(p: &DMatrix<f64>, t: f64, tag: RiccatiTag) -> Result<()> {
    let norm = max_norm(p);
    if !norm.is_finite() || norm > BLOWUP_GUARD {
        return Err(Error::Blowup {
            context: tag.name(),
            time: t,
            norm,
        });
    }
    Ok(())
}

fn integrate(
    tag: RiccatiTag,
    spec: &ProblemSpec,
    grid: TimeGrid,
    p1: Option<&RiccatiSolution>,
) -> Result<RiccatiSolution> {
    if let Some(p1) = p1 {
        if p1.grid != grid || p1.tag != RiccatiTag::RE1 {
            return Err(Error::GridMismatch(format!(
                "{} solved on {} steps over [0, {}], requested {} steps over [0, {}]",
                p1.tag.name(),
                p1.grid.steps,
                p1.grid.horizon,
                grid.steps,
                grid.horizon
            )));
        }
    }
    let symmetric = tag != RiccatiTag::RE3;
    let n_nodes = grid.len();
    let h = grid.dt();
    let mut p = vec![DMatrix::zeros(0, 0); n_nodes];
    let mut dp = vec![DMatrix::zeros(0, 0); n_nodes];
    let mut r_op = vec![DMatrix::zeros(0, 0); n_nodes];

    let last = grid.steps;
    let t_end = grid.node(last);
    let mut cur = terminal(tag, spec);
    let node_p1 = |k: usize| p1.map(|s| &s.p[k]);
    let snap_end = spec.snapshot(t_end);
    let (d_end, r_end) = rhs(tag, &snap_end, &cur, node_p1(last), t_end)?;
    p[last] = cur.clone();
    dp[last] = d_end;
    r_op[last] = r_end;

    for k in (0..last).rev() {
        let t1 = grid.node(k + 1);
        let t0 = grid.node(k);
        let tm = 0.5 * (t0 + t1);
        // Coefficients on [t0, t1) are those of the piece containing t0, so
        // the first stage takes the left limit at t1.
        let s1 = spec.snapshot(t0 + h * (1.0 - 1e-9));
        let sm = spec.snapshot(tm);
        let s0 = spec.snapshot(t0);
        let p1_1 = p1.map(|s| p1_stage(s, k, 1.0));
        let p1_m = p1.map(|s| p1_stage(s, k, 0.5));
        let p1_0 = p1.map(|s| p1_stage(s, k, 0.0));

        let k1 = rhs(tag, &s1, &cur, p1_1.as_ref(), t1)?.0;
        let y2 = &cur - &k1 * (0.5 * h);
        let k2 = rhs(tag, &sm, &y2, p1_m.as_ref(), tm)?.0;
        let y3 = &cur - &k2 * (0.5 * h);
        let k3 = rhs(tag, &sm, &y3, p1_m.as_ref(), tm)?.0;
        let y4 = &cur - &k3 * h;
        let k4 = rhs(tag, &s0, &y4, p1_0.as_ref(), t0)?.0;
        let mut next = &cur - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if symmetric {
            next = symmetric_part(&next);
        }
        guard(&next, t0, tag)?;
        let (d0, r0) = rhs(tag, &s0, &next, node_p1(k), t0)?;
        p[k] = next.clone();
        dp[k] = d0;
        r_op[k] = r0;
        cur = next;
    }

    let min_eig: Vec<f64> = r_op.iter().map(min_sym_eigenvalue).collect();
    let regular = min_eig.iter().all(|&e| e >= DEFAULT_EPS_REG);
    Ok(RiccatiSolution {
        tag,
        grid,
        p,
        r_op,
        min_eig,
        regular,
        step_halving_error: f64::NAN,
        dp,
    })
}

fn halving_difference(coarse: &RiccatiSolution, fine: &RiccatiSolution) -> f64 {
    coarse
        .p
        .iter()
        .enumerate()
        .map(|(k, pk)| max_norm(&(pk - &fine.p[2 * k])))
        .fold(0.0, f64::max)
}

pub fn solve_re1(spec: &ProblemSpec, grid: TimeGrid) -> Result<RiccatiSolution> {
    let mut sol = integrate(RiccatiTag::RE1, spec, grid, None)?;
    let fine = integrate(RiccatiTag::RE1, spec, grid.refined(), None)?;
    sol.step_halving_error = halving_difference(&sol, &fine);
    Ok(sol)
}

fn solve_coupled(
    tag: RiccatiTag,
    spec: &ProblemSpec,
    grid: TimeGrid,
    p1: &RiccatiSolution,
) -> Result<RiccatiSolution> {
    let mut sol = integrate(tag, spec, grid, Some(p1))?;
    let fine_grid = grid.refined();
    let p1_fine = integrate(RiccatiTag::RE1, spec, fine_grid, None)?;
    let fine = integrate(tag, spec, fine_grid, Some(&p1_fine))?;
    sol.step_halving_error = halving_difference(&sol, &fine);
    Ok(sol)
}

pub fn solve_re2(
    spec: &ProblemSpec,
    grid: TimeGrid,
    p1: &RiccatiSolution,
) -> Result<RiccatiSolution> {
    solve_coupled(RiccatiTag::RE2, spec, grid, p1)
}

pub fn solve_re3(
    spec: &ProblemSpec,
    grid: TimeGrid,
    p1: &RiccatiSolution,
) -> Result<RiccatiSolution> {
    solve_coupled(RiccatiTag::RE3, spec, grid, p1)
}

/// All three solutions on the problem's own grid.
#[derive(Debug, Clone)]
pub struct RiccatiSet {
    pub p1: RiccatiSolution,
    pub p2: RiccatiSolution,
    pub p3: RiccatiSolution,
}

pub fn solve_all(spec: &ProblemSpec, grid: TimeGrid) -> Result<RiccatiSet> {
    let p1 = solve_re1(spec, grid)?;
    let (p2, p3) = rayon::join(|| solve_re2(spec, grid, &p1), || solve_re3(spec, grid, &p1));
    Ok(RiccatiSet {
        p2: p2?,
        p3: p3?,
        p1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub tag: RiccatiTag,
    pub eps_reg: f64,
    pub min_eig: Vec<f64>,
    pub global_min: f64,
    pub argmin_time: f64,
    pub pass: bool,
}

pub fn regularity(sol: &RiccatiSolution, eps_reg: f64) -> RegularityReport {
    let (idx, global_min) =
        sol.min_eig
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (k, v)| if v < acc.1 { (k, v) } else { acc },
            );
    RegularityReport {
        tag: sol.tag,
        eps_reg,
        min_eig: sol.min_eig.clone(),
        global_min,
        argmin_time: sol.grid.node(idx),
        pass: sol.min_eig.iter().all(|&e| e >= eps_reg),
    }
}
