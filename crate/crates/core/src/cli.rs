//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    certify, convergence_study, ordering_check, paper_example, paper_spec, perturbation_optimality,
    special_spec, ExperimentConfig, PerturbationConfig, PerturbationReport,
    DEFAULT_OPTIMALITY_REPLICATIONS,
};
use crate::error::{Error, Result};
use crate::export;
use crate::linalg::max_norm;
use crate::model::{
    parse_problem_json, special_case_predicate, ProblemSpec, SPECIAL_CASE_TOLERANCE,
};
use crate::riccati::{regularity, solve_all, RiccatiSet, TimeGrid};
use crate::simulate::{
    estimate_cost_limit, mc_value, population_costs, simulate_population, steps_for,
    summarize_population, CostEstimate, CostTag, NoiseBundle,
};
use crate::strategy::{
    equivalence_check, stationarity_residuals, synthesize_mc_mt, synthesize_mg, FeedbackLaw,
    EQUIVALENCE_TOLERANCE,
};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IRREGULAR: i32 = 3;
pub const EXIT_BLOWUP: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "mflq",
    version,
    about = "Linear-quadratic mean-field control, team and game solver"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LawArg {
    McMt,
    Mg,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Problem JSON file, or `builtin:paper` / `builtin:special`.
    #[arg(long, default_value = "builtin:paper")]
    pub problem: String,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Population sizes, comma separated.
    #[arg(long = "N", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Monte Carlo replications.
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Riccati grid intervals.
    #[arg(long)]
    pub nt: Option<usize>,
    /// Euler-Maruyama steps per unit time.
    #[arg(long)]
    pub sde_steps: Option<usize>,
    #[arg(long)]
    pub eps_reg: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the three Riccati equations and write traces, gains and regularity.
    Riccati(CommonArgs),
    /// Simulate one feedback law in the N-agent system and write costs.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "mc-mt")]
        law: LawArg,
        /// Also write the first replication of the first population size.
        #[arg(long)]
        trajectory: bool,
    },
    /// Team, control and game costs across population sizes.
    Compare(CommonArgs),
    /// Decay of the team cost gap across population sizes.
    Convergence(CommonArgs),
    /// Identities, equivalences, value identity and perturbation optimality.
    Verify(CommonArgs),
    /// The reference study: eigenvalue traces and cost trends.
    PaperExample(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Riccati,
    Simulate { law: LawArg, trajectory: bool },
    Compare,
    Convergence,
    Verify,
    PaperExample,
}

/// Fully resolved invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    pub problem: String,
    pub out: PathBuf,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn from_command(cmd: Command) -> Result<Self> {
        let (command, args) = match cmd {
            Command::Riccati(a) => (CommandKind::Riccati, a),
            Command::Simulate {
                common,
                law,
                trajectory,
            } => (CommandKind::Simulate { law, trajectory }, common),
            Command::Compare(a) => (CommandKind::Compare, a),
            Command::Convergence(a) => (CommandKind::Convergence, a),
            Command::Verify(a) => (CommandKind::Verify, a),
            Command::PaperExample(a) => (CommandKind::PaperExample, a),
        };
        let mut exp = ExperimentConfig::default();
        if command == CommandKind::Verify {
            exp.replications = DEFAULT_OPTIMALITY_REPLICATIONS;
        }
        if let Some(n) = args.n {
            if n.is_empty() || n.contains(&0) {
                return Err(Error::validation("N", "population sizes must be positive"));
            }
            exp.n_list = n;
        }
        if let Some(m) = args.m {
            if m < 2 {
                return Err(Error::validation("M", "need at least 2 replications"));
            }
            exp.replications = m;
        }
        if let Some(s) = args.seed {
            exp.seed = s;
        }
        if let Some(nt) = args.nt {
            if nt == 0 {
                return Err(Error::validation("nt", "must be positive"));
            }
            exp.n_t = Some(nt);
        }
        if let Some(s) = args.sde_steps {
            if s == 0 {
                return Err(Error::validation("sde-steps", "must be positive"));
            }
            exp.sde_steps = s;
        }
        if let Some(e) = args.eps_reg {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::validation("eps-reg", "must be positive and finite"));
            }
            exp.eps_reg = e;
        }
        Ok(RunConfig {
            command,
            problem: args.problem,
            out: args.out,
            experiment: exp,
        })
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Json(_) | Error::InsufficientReplications(_) => {
            EXIT_VALIDATION
        }
        Error::Irregular(_) | Error::SingularGain { .. } => EXIT_IRREGULAR,
        Error::Blowup { .. } => EXIT_BLOWUP,
        Error::GridMismatch(_) | Error::Io(_) => EXIT_FAILURE,
    }
}

/// Reads `builtin:paper`, `builtin:special` or a JSON file. A missing or
/// unreadable file is a validation error.
pub fn load_problem(source: &str, n_t: Option<usize>) -> Result<ProblemSpec> {
    let spec = match source {
        "builtin:paper" => paper_spec(),
        "builtin:special" => special_spec(),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::validation("problem", format!("cannot read {path}: {e}")))?;
            parse_problem_json(&text)?
        }
    };
    match n_t {
        Some(nt) if nt != spec.dims.n_t => {
            let mut c = spec.to_candidate();
            c.dims.n_t = nt;
            c.validate()
        }
        _ => Ok(spec),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(
        path,
        serde_json::to_string_pretty(value)? + "\n",
    )?)
}

/// Whether the command's own checks passed. Errors are returned separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.command == CommandKind::PaperExample {
        paper_example(&cfg.out, &cfg.experiment)?;
        return Ok(Outcome::Success);
    }
    let spec = load_problem(&cfg.problem, cfg.experiment.n_t)?;
    let exp = ExperimentConfig {
        n_t: None,
        ..cfg.experiment.clone()
    };
    fs::create_dir_all(&cfg.out)?;
    let out = cfg.out.as_path();
    match cfg.command {
        CommandKind::Riccati => run_riccati(&spec, &exp, out),
        CommandKind::Simulate { law, trajectory } => {
            run_simulate(&spec, &exp, out, law, trajectory)
        }
        CommandKind::Compare => {
            let rep = ordering_check(&spec, &exp)?;
            export::write_costs_vs_n(&out.join("costs_vs_N.csv"), &rep)?;
            write_json(&out.join("ordering.json"), &rep)?;
            Ok(Outcome::Success)
        }
        CommandKind::Convergence => {
            let rep = convergence_study(&spec, &exp)?;
            export::write_convergence(&out.join("convergence.csv"), &rep)?;
            write_json(&out.join("convergence.json"), &rep)?;
            Ok(Outcome::Success)
        }
        CommandKind::Verify => run_verify(&spec, &exp, out),
        CommandKind::PaperExample => unreachable!(),
    }
}

fn solve_certified(spec: &ProblemSpec, eps_reg: f64) -> Result<RiccatiSet> {
    let set = solve_all(spec, TimeGrid::for_spec(spec))?;
    certify(&[&set.p1, &set.p2, &set.p3], eps_reg)?;
    Ok(set)
}

fn run_riccati(spec: &ProblemSpec, exp: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let set = solve_all(spec, TimeGrid::for_spec(spec))?;
    let sols = [&set.p1, &set.p2, &set.p3];
    for (sol, name) in sols.iter().zip(["re1.csv", "re2.csv", "re3.csv"]) {
        export::write_riccati_trace(&out.join(name), sol)?;
    }
    #[derive(Serialize)]
    struct Entry {
        tag: &'static str,
        global_min: f64,
        argmin_time: f64,
        pass: bool,
        step_halving_error: f64,
    }
    let entries: Vec<Entry> = sols
        .iter()
        .map(|s| {
            let r = regularity(s, exp.eps_reg);
            Entry {
                tag: s.tag.name(),
                global_min: r.global_min,
                argmin_time: r.argmin_time,
                pass: r.pass,
                step_halving_error: s.step_halving_error,
            }
        })
        .collect();
    #[derive(Serialize)]
    struct Report {
        eps_reg: f64,
        mc_value: f64,
        equations: Vec<Entry>,
    }
    write_json(
        &out.join("regularity.json"),
        &Report {
            eps_reg: exp.eps_reg,
            mc_value: mc_value(&set.p2, &spec.x0),
            equations: entries,
        },
    )?;
    certify(&sols, exp.eps_reg)?;
    export::write_gains(
        &out.join("gains_mc_mt.csv"),
        &synthesize_mc_mt(spec, &set.p1, &set.p2)?,
    )?;
    export::write_gains(
        &out.join("gains_mg.csv"),
        &synthesize_mg(spec, &set.p1, &set.p3)?,
    )?;
    Ok(Outcome::Success)
}

fn run_simulate(
    spec: &ProblemSpec,
    exp: &ExperimentConfig,
    out: &Path,
    law_arg: LawArg,
    trajectory: bool,
) -> Result<Outcome> {
    let set = solve_certified(spec, exp.eps_reg)?;
    let law: FeedbackLaw = match law_arg {
        LawArg::McMt => synthesize_mc_mt(spec, &set.p1, &set.p2)?,
        LawArg::Mg => synthesize_mg(spec, &set.p1, &set.p3)?,
    };
    let steps = steps_for(spec.dims.horizon, exp.sde_steps);
    let mut rows: Vec<(Option<usize>, CostEstimate)> = Vec::new();
    for &n in &exp.n_list {
        let noise = NoiseBundle::new(exp.seed, exp.replications, n, steps, spec.dims.horizon);
        let costs = population_costs(spec, &law, &noise)?;
        let tags: &[CostTag] = match law_arg {
            LawArg::McMt => &[CostTag::MtSocial, CostTag::MtPerAgent],
            LawArg::Mg => &[CostTag::MgIndividual],
        };
        for &tag in tags {
            rows.push((Some(n), summarize_population(&costs, 0, tag)?));
        }
    }
    if law_arg == LawArg::McMt {
        let limit = estimate_cost_limit(spec, &law, exp.replications, exp.seed, exp.sde_steps)?;
        rows.push((None, limit));
    }
    export::write_costs(&out.join("costs.csv"), &rows)?;
    if trajectory {
        let noise = NoiseBundle::new(
            exp.seed,
            exp.replications,
            exp.n_list[0],
            steps,
            spec.dims.horizon,
        );
        let traj = simulate_population(spec, &law, &noise, 0)?;
        export::write_trajectory(&out.join("trajectory.csv"), &traj)?;
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Check {
    fn le(name: &'static str, value: f64, threshold: f64) -> Self {
        Check {
            name,
            pass: value <= threshold,
            value,
            threshold,
            note: None,
        }
    }

    fn errored(name: &'static str, err: &Error) -> Self {
        Check {
            name,
            pass: false,
            value: f64::NAN,
            threshold: f64::NAN,
            note: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub checks: Vec<Check>,
    pub mc_value: f64,
    pub mc_estimate: CostEstimate,
    pub perturbation: PerturbationReport,
}

fn max_diff(a: &[nalgebra::DMatrix<f64>], b: &[nalgebra::DMatrix<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| max_norm(&(x - y)))
        .fold(0.0, f64::max)
}

/// `P1 = P2 = P3` once the mean field and tracking are switched off.
fn collapse_checks(spec: &ProblemSpec) -> Vec<Check> {
    let set = spec
        .to_candidate()
        .decoupled(0.0)
        .validate()
        .and_then(|s| solve_all(&s, TimeGrid::for_spec(&s)));
    match set {
        Ok(set) => vec![
            Check::le("collapse_P1_P2", max_diff(&set.p1.p, &set.p2.p), 1e-8),
            Check::le("collapse_P1_P3", max_diff(&set.p1.p, &set.p3.p), 1e-8),
        ],
        Err(e) => vec![Check::errored("collapse", &e)],
    }
}

/// Game and control laws coincide with no mean field and full tracking.
fn special_checks(spec: &ProblemSpec, as_given: bool) -> Vec<Check> {
    let go = || -> Result<Vec<Check>> {
        let s = if as_given {
            spec.clone()
        } else {
            spec.to_candidate().decoupled(1.0).validate()?
        };
        let set = solve_all(&s, TimeGrid::for_spec(&s))?;
        let mc = synthesize_mc_mt(&s, &set.p1, &set.p2)?;
        let mg = synthesize_mg(&s, &set.p1, &set.p3)?;
        let eq = equivalence_check(&mc, &mg, EQUIVALENCE_TOLERANCE)?;
        let names = if as_given {
            ("input_special_P2_P3", "input_special_gains")
        } else {
            ("special_P2_P3", "special_gains")
        };
        Ok(vec![
            Check::le(
                names.0,
                max_diff(&set.p2.p, &set.p3.p),
                EQUIVALENCE_TOLERANCE,
            ),
            Check::le(
                names.1,
                eq.mean_gain_diff.max(eq.dev_gain_diff),
                EQUIVALENCE_TOLERANCE,
            ),
        ])
    };
    go().unwrap_or_else(|e| vec![Check::errored("special", &e)])
}

fn run_verify(spec: &ProblemSpec, exp: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let set = solve_certified(spec, exp.eps_reg)?;
    let mc = synthesize_mc_mt(spec, &set.p1, &set.p2)?;
    let mg = synthesize_mg(spec, &set.p1, &set.p3)?;

    let mut checks = Vec::new();
    let (dev, mean) = stationarity_residuals(spec, &set.p1, &set.p2, &mc)?;
    checks.push(Check::le("stationarity_MC_MT", dev.max(mean), 1e-9));
    let (dev, mean) = stationarity_residuals(spec, &set.p1, &set.p3, &mg)?;
    checks.push(Check::le("stationarity_MG", dev.max(mean), 1e-9));
    checks.push(Check::le(
        "shared_deviation_gain",
        max_diff(&mc.theta_dev, &mg.theta_dev),
        0.0,
    ));
    checks.extend(collapse_checks(spec));
    checks.extend(special_checks(spec, false));
    if special_case_predicate(spec, SPECIAL_CASE_TOLERANCE).holds {
        checks.extend(special_checks(spec, true));
    }

    let value = mc_value(&set.p2, &spec.x0);
    let est = estimate_cost_limit(spec, &mc, exp.replications, exp.seed, exp.sde_steps)?;
    checks.push(Check::le(
        "value_identity",
        (est.mean - value).abs(),
        3.0 * est.stderr + 0.02 * value.abs(),
    ));

    let pcfg = PerturbationConfig {
        replications: exp.replications,
        seed: exp.seed,
        sde_steps: exp.sde_steps,
        eps_reg: exp.eps_reg,
        ..PerturbationConfig::default()
    };
    let pert = perturbation_optimality(spec, &mc, &pcfg)?;
    let worst = pert
        .results
        .iter()
        .map(|r| r.derivative.abs() - r.tolerance)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check {
        name: "perturbation_optimality",
        pass: pert.pass,
        value: worst,
        threshold: 0.0,
        note: Some("largest |derivative| minus its tolerance".into()),
    });
    checks.push(Check {
        name: "perturbation_convexity",
        pass: pert.convex,
        value: f64::NAN,
        threshold: f64::NAN,
        note: None,
    });

    let report = VerifyReport {
        pass: checks.iter().all(|c| c.pass),
        checks,
        mc_value: value,
        mc_estimate: est,
        perturbation: pert,
    };
    write_json(&out.join("verify.json"), &report)?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!(
            "verify: {} failed (value {:e}, threshold {:e})",
            c.name, c.value, c.threshold
        );
    }
    Ok(if report.pass {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}
