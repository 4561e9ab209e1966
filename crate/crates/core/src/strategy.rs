//! Decentralized feedback laws `u = theta_mean * m + theta_dev * (x - m)`.
//!
//! The control and team problems share one law (their closed-loop feedbacks
//! coincide), so there is a single synthesis routine for both.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::max_norm;
use crate::model::ProblemSpec;
use crate::riccati::{node_gain, RiccatiSolution, RiccatiTag, TimeGrid};

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LawTag {
    #[serde(rename = "MC_MT")]
    McMt,
    #[serde(rename = "MG")]
    Mg,
}

impl LawTag {
    pub fn name(self) -> &'static str {
        match self {
            LawTag::McMt => "MC_MT",
            LawTag::Mg => "MG",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub tag: LawTag,
    pub grid: TimeGrid,
    /// Gain on the conditional mean, per node (`m x n`).
    pub theta_mean: Vec<DMatrix<f64>>,
    /// Gain on the deviation from the conditional mean, per node (`m x n`).
    pub theta_dev: Vec<DMatrix<f64>>,
}

impl FeedbackLaw {
    /// Linearly interpolated `(theta_mean, theta_dev)` at `t`.
    pub fn gains_at(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (k, f) = self.grid.locate(t);
        let lerp = |v: &[DMatrix<f64>]| &v[k] * (1.0 - f) + &v[k + 1] * f;
        (lerp(&self.theta_mean), lerp(&self.theta_dev))
    }

    /// Same law with the deviation gain multiplied by `factor`.
    pub fn with_dev_scaled(&self, factor: f64) -> FeedbackLaw {
        FeedbackLaw {
            theta_dev: self.theta_dev.iter().map(|g| g * factor).collect(),
            ..self.clone()
        }
    }
}

fn same_grid(a: TimeGrid, b: TimeGrid, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {} vs {} steps",
            a.steps, b.steps
        )));
    }
    Ok(())
}

fn synthesize(
    tag: LawTag,
    spec: &ProblemSpec,
    p1: &RiccatiSolution,
    mean: &RiccatiSolution,
) -> Result<FeedbackLaw> {
    same_grid(p1.grid, mean.grid, "Riccati solutions")?;
    let grid = p1.grid;
    let mut theta_mean = Vec::with_capacity(grid.len());
    let mut theta_dev = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t = grid.node(k);
        let s = spec.snapshot(t);
        let (dev, _, _) = node_gain(RiccatiTag::RE1, &s, &p1.p[k], &p1.p[k], t)?;
        let (mg, _, _) = node_gain(mean.tag, &s, &mean.p[k], &p1.p[k], t)?;
        theta_mean.push(mg);
        theta_dev.push(dev);
    }
    Ok(FeedbackLaw {
        tag,
        grid,
        theta_mean,
        theta_dev,
    })
}

/// Law shared by the control and team problems, from `P1` and `P2`.
pub fn synthesize_mc_mt(
    spec: &ProblemSpec,
    p1: &RiccatiSolution,
    p2: &RiccatiSolution,
) -> Result<FeedbackLaw> {
    if p2.tag != RiccatiTag::RE2 {
        return Err(Error::validation("p2", "expected an RE2 solution"));
    }
    synthesize(LawTag::McMt, spec, p1, p2)
}

/// Game law from `P1` and the asymmetric `P3`.
pub fn synthesize_mg(
    spec: &ProblemSpec,
    p1: &RiccatiSolution,
    p3: &RiccatiSolution,
) -> Result<FeedbackLaw> {
    if p3.tag != RiccatiTag::RE3 {
        return Err(Error::validation("p3", "expected an RE3 solution"));
    }
    synthesize(LawTag::Mg, spec, p1, p3)
}

#[derive(Debug, Clone)]
pub struct ClosedLoopCoefficients {
    pub grid: TimeGrid,
    pub dev_drift: Vec<DMatrix<f64>>,
    pub mean_drift: Vec<DMatrix<f64>>,
    pub dev_diff_i: Vec<DMatrix<f64>>,
    pub mean_diff_i: Vec<DMatrix<f64>>,
    pub dev_diff_0: Vec<DMatrix<f64>>,
    pub mean_diff_0: Vec<DMatrix<f64>>,
}

pub fn closed_loop(spec: &ProblemSpec, law: &FeedbackLaw) -> ClosedLoopCoefficients {
    let grid = law.grid;
    let mut out = ClosedLoopCoefficients {
        grid,
        dev_drift: Vec::with_capacity(grid.len()),
        mean_drift: Vec::with_capacity(grid.len()),
        dev_diff_i: Vec::with_capacity(grid.len()),
        mean_diff_i: Vec::with_capacity(grid.len()),
        dev_diff_0: Vec::with_capacity(grid.len()),
        mean_diff_0: Vec::with_capacity(grid.len()),
    };
    for k in 0..grid.len() {
        let s = spec.snapshot(grid.node(k));
        let (tm, td) = (&law.theta_mean[k], &law.theta_dev[k]);
        out.dev_drift.push(&s.a + &s.b * td);
        out.mean_drift.push(&s.a_cal + &s.b_cal * tm);
        out.dev_diff_i.push(&s.c + &s.d * td);
        out.mean_diff_i.push(&s.c_cal + &s.d_cal * tm);
        out.dev_diff_0.push(&s.c0 + &s.d0 * td);
        out.mean_diff_0.push(&s.c0_cal + &s.d0_cal * tm);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub tags: (LawTag, LawTag),
    pub mean_gain_diff: f64,
    pub dev_gain_diff: f64,
    pub tolerance: f64,
    pub equal: bool,
}

pub fn equivalence_check(
    law_a: &FeedbackLaw,
    law_b: &FeedbackLaw,
    tol: f64,
) -> Result<EquivalenceReport> {
    same_grid(law_a.grid, law_b.grid, "feedback laws")?;
    let diff = |x: &[DMatrix<f64>], y: &[DMatrix<f64>]| {
        x.iter()
            .zip(y)
            .map(|(a, b)| max_norm(&(a - b)))
            .fold(0.0, f64::max)
    };
    let mean_gain_diff = diff(&law_a.theta_mean, &law_b.theta_mean);
    let dev_gain_diff = diff(&law_a.theta_dev, &law_b.theta_dev);
    Ok(EquivalenceReport {
        tags: (law_a.tag, law_b.tag),
        mean_gain_diff,
        dev_gain_diff,
        tolerance: tol,
        equal: mean_gain_diff <= tol && dev_gain_diff <= tol,
    })
}

/// Max-norm residuals of `R_op * theta + right = 0` for the deviation and
/// mean gains over all nodes.
pub fn stationarity_residuals(
    spec: &ProblemSpec,
    p1: &RiccatiSolution,
    mean: &RiccatiSolution,
    law: &FeedbackLaw,
) -> Result<(f64, f64)> {
    let mut worst = (0.0_f64, 0.0_f64);
    for k in 0..law.grid.len() {
        let t = law.grid.node(k);
        let s = spec.snapshot(t);
        let (_, r1, right1) = node_gain(RiccatiTag::RE1, &s, &p1.p[k], &p1.p[k], t)?;
        let (_, rm, rightm) = node_gain(mean.tag, &s, &mean.p[k], &p1.p[k], t)?;
        worst.0 = worst.0.max(max_norm(&(r1 * &law.theta_dev[k] + right1)));
        worst.1 = worst.1.max(max_norm(&(rm * &law.theta_mean[k] + rightm)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::paper::{paper_spec, special_spec};
    use crate::model::{MatrixSchedule, ProblemCandidate};
    use crate::riccati::{solve_all, solve_re1, solve_re2, RiccatiSet};

    fn laws(spec: &ProblemSpec) -> (RiccatiSet, FeedbackLaw, FeedbackLaw) {
        let set = solve_all(spec, TimeGrid::for_spec(spec)).unwrap();
        let mc = synthesize_mc_mt(spec, &set.p1, &set.p2).unwrap();
        let mg = synthesize_mg(spec, &set.p1, &set.p3).unwrap();
        (set, mc, mg)
    }

    #[test]
    fn zero_problem_has_zero_gains() {
        let spec = ProblemCandidate::zeros(2, 2, 1.0, 100).validate().unwrap();
        let (_, mc, _) = laws(&spec);
        assert!(mc
            .theta_mean
            .iter()
            .chain(&mc.theta_dev)
            .all(|g| max_norm(g) == 0.0));
    }

    #[test]
    fn scalar_dev_gain_at_zero() {
        let one = || DMatrix::from_element(1, 1, 1.0);
        let mut c = ProblemCandidate::zeros(1, 1, 1.0, 1000);
        c.coeffs.b = MatrixSchedule::constant(one());
        c.weights.g = one();
        let spec = c.validate().unwrap();
        let (_, mc, _) = laws(&spec);
        assert!((mc.theta_dev[0][(0, 0)] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn reference_gains_stable_under_grid_halving() {
        let spec = paper_spec();
        let (_, mc, _) = laws(&spec);
        let fine = TimeGrid::for_spec(&spec).refined();
        let p1 = solve_re1(&spec, fine).unwrap();
        let p2 = solve_re2(&spec, fine, &p1).unwrap();
        let mc_fine = synthesize_mc_mt(&spec, &p1, &p2).unwrap();
        assert!(max_norm(&(&mc.theta_mean[0] - &mc_fine.theta_mean[0])) <= 1e-6);
        assert!(max_norm(&(&mc.theta_dev[0] - &mc_fine.theta_dev[0])) <= 1e-6);
    }

    #[test]
    fn game_and_control_laws() {
        let spec = paper_spec();
        let (set, mc, mg) = laws(&spec);
        assert_eq!(mc.theta_dev, mg.theta_dev);
        let rep = equivalence_check(&mc, &mg, EQUIVALENCE_TOLERANCE).unwrap();
        assert!(!rep.equal && rep.mean_gain_diff > 1e-3);
        let same = equivalence_check(&mc, &mc, EQUIVALENCE_TOLERANCE).unwrap();
        assert!(same.equal && same.mean_gain_diff == 0.0 && same.dev_gain_diff == 0.0);
        let (r_dev, r_mean) = stationarity_residuals(&spec, &set.p1, &set.p2, &mc).unwrap();
        assert!(r_dev <= 1e-9 && r_mean <= 1e-9);
        let (_, r_mg) = stationarity_residuals(&spec, &set.p1, &set.p3, &mg).unwrap();
        assert!(r_mg <= 1e-9);
    }

    #[test]
    fn special_regime_laws_coincide() {
        let spec = special_spec();
        let (_, mc, mg) = laws(&spec);
        assert!(
            equivalence_check(&mc, &mg, EQUIVALENCE_TOLERANCE)
                .unwrap()
                .equal
        );
    }

    #[test]
    fn decoupled_laws_coincide() {
        let mut c = paper_spec().to_candidate();
        for s in [
            &mut c.coeffs.a_bar,
            &mut c.coeffs.b_bar,
            &mut c.coeffs.c_bar,
            &mut c.coeffs.d_bar,
        ] {
            *s = MatrixSchedule::zeros(2, 2);
        }
        c.weights.gamma1 = MatrixSchedule::zeros(2, 2);
        c.weights.gamma2 = DMatrix::zeros(2, 2);
        let spec = c.validate().unwrap();
        let (_, mc, mg) = laws(&spec);
        let rep = equivalence_check(&mc, &mg, 1e-10).unwrap();
        assert!(rep.equal, "{rep:?}");
    }

    #[test]
    fn closed_loop_assembly() {
        let spec = paper_spec();
        let (_, mc, _) = laws(&spec);
        let cl = closed_loop(&spec, &mc);
        let s = spec.snapshot(0.0);
        let tm = &mc.theta_mean[0];
        for i in 0..2 {
            for j in 0..2 {
                let mut v = s.a[(i, j)] + s.a_bar[(i, j)];
                for l in 0..2 {
                    v += (s.b[(i, l)] + s.b_bar[(i, l)]) * tm[(l, j)];
                }
                assert!((cl.mean_drift[0][(i, j)] - v).abs() < 1e-14);
            }
        }

        let mut zero = mc.clone();
        for g in zero.theta_mean.iter_mut().chain(zero.theta_dev.iter_mut()) {
            g.fill(0.0);
        }
        let cl0 = closed_loop(&spec, &zero);
        assert_eq!(cl0.dev_drift[3], s.a);
        assert_eq!(cl0.mean_drift[3], &s.a + &s.a_bar);
    }

    #[test]
    fn closed_loop_ignores_law_without_control_channels() {
        let mut c = paper_spec().to_candidate();
        for s in [
            &mut c.coeffs.b,
            &mut c.coeffs.b_bar,
            &mut c.coeffs.d,
            &mut c.coeffs.d_bar,
            &mut c.coeffs.d0,
            &mut c.coeffs.d0_bar,
        ] {
            *s = MatrixSchedule::zeros(2, 2);
        }
        let spec = c.validate().unwrap();
        let (_, mc, mg) = laws(&spec);
        let scaled = mc.with_dev_scaled(3.0);
        let a = closed_loop(&spec, &mc);
        for other in [closed_loop(&spec, &mg), closed_loop(&spec, &scaled)] {
            assert_eq!(a.dev_drift, other.dev_drift);
            assert_eq!(a.mean_drift, other.mean_drift);
            assert_eq!(a.mean_diff_i, other.mean_diff_i);
            assert_eq!(a.dev_diff_0, other.dev_diff_0);
        }
    }

    #[test]
    fn team_law_is_the_control_law() {
        // Only one routine produces the team feedback.
        let src = include_str!("strategy.rs");
        assert!(!src.contains(concat!("fn synthesize", "_mt(")));
        assert!(!src.contains(concat!("LawTag::", "Mt,")));
    }

    #[test]
    fn grid_mismatch_in_equivalence() {
        let spec = paper_spec();
        let (_, mc, _) = laws(&spec);
        let mut other = mc.clone();
        other.grid = TimeGrid::new(1.0, 7);
        assert!(matches!(
            equivalence_check(&mc, &other, 1e-8),
            Err(Error::GridMismatch(_))
        ));
    }
}
