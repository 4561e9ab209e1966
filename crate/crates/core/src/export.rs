//! CSV artifacts. Numbers are written with 17 significant digits so they
//! round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analysis::convergence::ConvergenceReport;
use crate::analysis::ordering::OrderingReport;
use crate::error::Result;
use crate::linalg::sym_eigenvalues;
use crate::riccati::RiccatiSolution;
use crate::simulate::{CostEstimate, PopulationTrajectory};
use crate::strategy::FeedbackLaw;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn row_major(m: &nalgebra::DMatrix<f64>, out: &mut String) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(',');
            out.push_str(&num(m[(i, j)]));
        }
    }
}

/// `t, P_11..P_nn, min_eig_R`
pub fn riccati_trace_csv(sol: &RiccatiSolution) -> String {
    let n = sol.p[0].nrows();
    let mut s = String::from("t");
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(s, ",P_{i}{j}");
        }
    }
    s.push_str(",min_eig_R\n");
    for (k, p) in sol.p.iter().enumerate() {
        s.push_str(&num(sol.grid.node(k)));
        row_major(p, &mut s);
        s.push(',');
        s.push_str(&num(sol.min_eig[k]));
        s.push('\n');
    }
    s
}

pub fn write_riccati_trace(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    Ok(fs::write(path, riccati_trace_csv(sol))?)
}

/// `t, eig_1..eig_m` of the symmetric part of the gain operator, ascending.
pub fn write_eigen_trace(path: &Path, sol: &RiccatiSolution) -> Result<()> {
    let m = sol.r_op[0].nrows();
    let mut s = String::from("t");
    for i in 1..=m {
        let _ = write!(s, ",eig_{i}");
    }
    s.push('\n');
    for (k, r) in sol.r_op.iter().enumerate() {
        s.push_str(&num(sol.grid.node(k)));
        for e in sym_eigenvalues(r) {
            s.push(',');
            s.push_str(&num(e));
        }
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

/// One table with the eigenvalues of every solution's gain operator.
pub fn write_eigen_traces(path: &Path, sols: &[&RiccatiSolution]) -> Result<()> {
    let mut s = String::from("t");
    for sol in sols {
        for i in 1..=sol.r_op[0].nrows() {
            let _ = write!(s, ",{}_eig_{i}", sol.tag.operator_name());
        }
    }
    s.push('\n');
    for k in 0..sols[0].grid.len() {
        s.push_str(&num(sols[0].grid.node(k)));
        for sol in sols {
            for e in sym_eigenvalues(&sol.r_op[k]) {
                s.push(',');
                s.push_str(&num(e));
            }
        }
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

/// `t, theta_mean (row-major), theta_dev (row-major)`
pub fn write_gains(path: &Path, law: &FeedbackLaw) -> Result<()> {
    let (m, n) = law.theta_mean[0].shape();
    let mut s = String::from("t");
    for name in ["theta_mean", "theta_dev"] {
        for i in 1..=m {
            for j in 1..=n {
                let _ = write!(s, ",{name}_{i}{j}");
            }
        }
    }
    s.push('\n');
    for k in 0..law.grid.len() {
        s.push_str(&num(law.grid.node(k)));
        row_major(&law.theta_mean[k], &mut s);
        row_major(&law.theta_dev[k], &mut s);
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

/// `problem_tag, N, M, mean, stderr`; `N` is empty for limit costs.
pub fn write_costs(path: &Path, rows: &[(Option<usize>, CostEstimate)]) -> Result<()> {
    let mut s = String::from("problem_tag,N,M,mean,stderr\n");
    for (n, e) in rows {
        let n = n.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.tag.name(),
            n,
            e.replications,
            num(e.mean),
            num(e.stderr)
        );
    }
    Ok(fs::write(path, s)?)
}

pub fn write_costs_vs_n(path: &Path, rep: &OrderingReport) -> Result<()> {
    let mut s =
        String::from("N,M,J_MT_per_agent,J_MT_stderr,J_MC,J_MG_individual,J_MG_stderr,allowance\n");
    for r in &rep.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.j_mt.replications,
            num(r.j_mt.mean),
            num(r.j_mt.stderr),
            num(rep.mc_value),
            num(r.j_mg.mean),
            num(r.j_mg.stderr),
            num(r.allowance)
        );
    }
    Ok(fs::write(path, s)?)
}

pub fn write_convergence(path: &Path, rep: &ConvergenceReport) -> Result<()> {
    let mut s = String::from("N,M,J_MT_per_agent,stderr,J_MC,gap\n");
    for ((n, e), g) in rep.n_list.iter().zip(&rep.per_agent).zip(&rep.gaps) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            n,
            e.replications,
            num(e.mean),
            num(e.stderr),
            num(rep.mc_value),
            num(*g)
        );
    }
    Ok(fs::write(path, s)?)
}

/// `t, agent, x_1..x_n, u_1..u_m`
pub fn write_trajectory(path: &Path, tr: &PopulationTrajectory) -> Result<()> {
    let mut s = String::from("t,agent");
    for i in 1..=tr.n {
        let _ = write!(s, ",x_{i}");
    }
    for i in 1..=tr.m {
        let _ = write!(s, ",u_{i}");
    }
    s.push('\n');
    for (k, t) in tr.times.iter().enumerate() {
        for a in 0..tr.agents {
            let _ = write!(s, "{},{}", num(*t), a);
            for v in tr.state(a, k).iter().chain(tr.control(a, k)) {
                s.push(',');
                s.push_str(&num(*v));
            }
            s.push('\n');
        }
    }
    Ok(fs::write(path, s)?)
}
