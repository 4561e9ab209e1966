//! The two-dimensional reference instance and its end-to-end report.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::analysis::ordering::{ordering_check, OrderingReport};
use crate::analysis::ExperimentConfig;
use crate::error::Result;
use crate::export::{write_costs_vs_n, write_eigen_trace, write_eigen_traces};
use crate::linalg::sym_eigenvalues;
use crate::model::{MatrixSchedule, ProblemCandidate, ProblemSpec};
use crate::riccati::{regularity, solve_all, RegularityReport, TimeGrid};

fn m2(v: [f64; 4]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &v)
}

fn c(v: [f64; 4]) -> MatrixSchedule {
    MatrixSchedule::constant(m2(v))
}

/// Reference instance on `[0, 1]`; the common-noise coefficients are zero.
pub fn paper_candidate() -> ProblemCandidate {
    let mut p = ProblemCandidate::zeros(2, 2, 1.0, 1000);
    let k = &mut p.coeffs;
    k.a = c([0.8903, 0.6517, 0.1961, 0.2188]);
    k.a_bar = c([0.7686, 0.8326, 0.0016, 0.3391]);
    k.b = c([0.0843, 0.0655, 0.4614, 0.1750]);
    k.b_bar = c([0.8735, 0.2435, 0.0124, 0.7822]);
    k.c = c([0.1499, 0.8148, 0.1800, 0.7488]);
    k.c_bar = c([0.2084, 0.0877, 0.6984, 0.8266]);
    k.d = c([0.9436, 0.0908, 0.6800, 0.1038]);
    k.d_bar = c([0.4319, 0.8377, 0.3086, 0.4565]);
    let w = &mut p.weights;
    w.q = c([-0.0290, 0.3912, 0.3912, 0.0257]);
    w.r = c([-0.1761, 0.0362, 0.0362, 0.5576]);
    w.g = m2([0.0940, 0.2564, 0.2564, 0.4806]);
    w.gamma1 = c([0.0815, 0.9821, 0.1076, 0.6146]);
    w.gamma2 = m2([0.2807, 0.3933, 0.0567, 0.1748]);
    p.x0 = vec![0.1037, 0.8396];
    p
}

pub fn paper_spec() -> ProblemSpec {
    paper_candidate()
        .validate()
        .expect("reference instance is valid")
}

/// Reference instance with every mean-field coefficient zeroed and full
/// tracking `Gamma1 = Gamma2 = I`.
pub fn special_spec() -> ProblemSpec {
    paper_candidate()
        .decoupled(1.0)
        .validate()
        .expect("special instance is valid")
}

/// Eigenvalues quoted for the reference weights.
pub const QUOTED_EIGENVALUES: [(&str, [f64; 2]); 3] = [
    ("Q", [-0.3938, 0.3905]),
    ("R", [-0.1779, 0.5594]),
    ("G", [-0.0338, 0.6084]),
];

#[derive(Debug, Clone, Serialize)]
pub struct EigenCheck {
    pub weight: String,
    pub computed: Vec<f64>,
    pub quoted: Vec<f64>,
    pub max_abs_error: f64,
    pub pass: bool,
}

/// Compares the weight eigenvalues with the quoted values at `tol`.
pub fn weight_eigen_checks(spec: &ProblemSpec, tol: f64) -> Vec<EigenCheck> {
    QUOTED_EIGENVALUES
        .iter()
        .map(|(name, quoted)| {
            let m = match *name {
                "Q" => spec.weights.q.at(0.0).clone(),
                "R" => spec.weights.r.at(0.0).clone(),
                _ => spec.weights.g.clone(),
            };
            let computed = sym_eigenvalues(&m);
            let max_abs_error = computed
                .iter()
                .zip(quoted)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            EigenCheck {
                weight: name.to_string(),
                computed,
                quoted: quoted.to_vec(),
                max_abs_error,
                pass: max_abs_error <= tol,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PaperExampleReport {
    pub common_noise_coefficients: &'static str,
    pub eigen_checks: Vec<EigenCheck>,
    pub regularity: Vec<RegularityReport>,
    pub mc_value: f64,
    pub special_mc_value: f64,
    pub ordering: OrderingReport,
    pub ordering_special: OrderingReport,
    pub config: ExperimentConfig,
}

/// Runs the reference study and writes its artifacts into `out`.
pub fn paper_example(out: &Path, cfg: &ExperimentConfig) -> Result<PaperExampleReport> {
    fs::create_dir_all(out)?;
    let mut spec = paper_spec();
    let mut special = special_spec();
    if let Some(nt) = cfg.n_t {
        let mut c = spec.to_candidate();
        c.dims.n_t = nt;
        spec = c.validate()?;
        let mut c = special.to_candidate();
        c.dims.n_t = nt;
        special = c.validate()?;
    }
    let grid = TimeGrid::for_spec(&spec);
    let set = solve_all(&spec, grid)?;
    let sols = [&set.p1, &set.p2, &set.p3];
    for (sol, name) in sols
        .iter()
        .zip(["r1_eigs.csv", "r2_eigs.csv", "r3_eigs.csv"])
    {
        write_eigen_trace(&out.join(name), sol)?;
    }
    write_eigen_traces(&out.join("r_eigs.csv"), &sols)?;
    let regularity: Vec<RegularityReport> =
        sols.iter().map(|s| regularity(s, cfg.eps_reg)).collect();

    let ordering = ordering_check(&spec, cfg)?;
    write_costs_vs_n(&out.join("costs_vs_N.csv"), &ordering)?;
    let ordering_special = ordering_check(&special, cfg)?;
    write_costs_vs_n(&out.join("costs_vs_N_special.csv"), &ordering_special)?;

    let report = PaperExampleReport {
        common_noise_coefficients: "C0 = C0_bar = D0 = D0_bar = 0",
        eigen_checks: weight_eigen_checks(&spec, 1e-3),
        regularity,
        mc_value: ordering.mc_value,
        special_mc_value: ordering_special.mc_value,
        ordering,
        ordering_special,
        config: cfg.clone(),
    };
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}
