use nalgebra::DMatrix;

use super::cost::replication_costs;
use super::engine::{run, Coupling, Observer, StepView};
use super::*;
use crate::analysis::paper::paper_spec;
use crate::error::Error;
use crate::linalg::max_norm;
use crate::model::{MatrixSchedule, ProblemCandidate, ProblemSpec};
use crate::riccati::{solve_all, TimeGrid};
use crate::strategy::{synthesize_mc_mt, synthesize_mg, FeedbackLaw};

fn laws(spec: &ProblemSpec) -> (FeedbackLaw, FeedbackLaw) {
    let set = solve_all(spec, TimeGrid::for_spec(spec)).unwrap();
    (
        synthesize_mc_mt(spec, &set.p1, &set.p2).unwrap(),
        synthesize_mg(spec, &set.p1, &set.p3).unwrap(),
    )
}

/// Without the control-noise coefficients the reference weights leave the
/// gain operator indefinite, so swap in identity weights.
fn definite_weights(c: &mut ProblemCandidate) {
    c.weights.q = MatrixSchedule::constant(DMatrix::identity(2, 2));
    c.weights.r = MatrixSchedule::constant(DMatrix::identity(2, 2));
    c.weights.g = DMatrix::identity(2, 2);
}

fn zero_spec(x0: Vec<f64>) -> ProblemSpec {
    let mut c = ProblemCandidate::zeros(2, 2, 1.0, 100);
    c.x0 = x0;
    c.validate().unwrap()
}

#[test]
fn mean_process_constant_without_dynamics() {
    let spec = zero_spec(vec![0.3, -1.2]);
    let (law, _) = laws(&spec);
    let w0 = NoiseBundle::new(1, 1, 0, 100, 1.0).path(0, StreamKey::Common);
    let path = simulate_mean_process(&spec, &law, &w0).unwrap();
    assert!(path.values.chunks(2).all(|v| v == [0.3, -1.2]));
}

#[test]
fn mean_process_exponential() {
    let mut c = ProblemCandidate::zeros(1, 1, 1.0, 100);
    c.coeffs.a = MatrixSchedule::constant(DMatrix::from_element(1, 1, 0.7));
    c.x0 = vec![2.0];
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let steps = 400;
    let w0 = NoiseBundle::new(3, 1, 0, steps, 1.0).path(0, StreamKey::Common);
    let path = simulate_mean_process(&spec, &law, &w0).unwrap();
    for k in [100, 250, 400] {
        let exact = 2.0 * (0.7 * k as f64 / steps as f64).exp();
        assert!(((path.at(k)[0] - exact) / exact).abs() <= 5.0 / steps as f64);
    }
}

#[test]
fn reference_mean_process_converges_to_fine_reference() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    // Time-ordered product of matrix exponentials on a much finer grid.
    let fine = 40_000;
    let h = 1.0 / fine as f64;
    let mut m = nalgebra::DVector::from_vec(spec.x0.clone());
    for k in 0..fine {
        let t = (k as f64 + 0.5) * h;
        let s = spec.snapshot(t);
        let (tm, _) = law.gains_at(t);
        m = ((&s.a_cal + &s.b_cal * tm) * h).exp() * m;
    }
    let err = |steps: usize| {
        let w0 = NoiseBundle::new(9, 1, 0, steps, 1.0).path(0, StreamKey::Common);
        let end = simulate_mean_process(&spec, &law, &w0)
            .unwrap()
            .terminal()
            .to_vec();
        (nalgebra::DVector::from_vec(end) - &m).norm()
    };
    let (coarse, finer) = (err(1000), err(2000));
    assert!(finer <= 5e-3 * m.norm(), "{finer}");
    let ratio = coarse / finer;
    assert!((1.8..=2.2).contains(&ratio), "Euler order ratio {ratio}");

    // Deterministic: any other common-noise path gives the same mean.
    let a = NoiseBundle::new(9, 1, 0, 500, 1.0).path(0, StreamKey::Common);
    let b = NoiseBundle::new(10, 1, 0, 500, 1.0).path(0, StreamKey::Common);
    assert_eq!(
        simulate_mean_process(&spec, &law, &a).unwrap().values,
        simulate_mean_process(&spec, &law, &b).unwrap().values
    );
}

#[test]
fn zero_population_stays_at_x0() {
    let spec = zero_spec(vec![0.1037, 0.8396]);
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(2, 1, 5, 50, 1.0);
    let tr = simulate_population(&spec, &law, &noise, 0).unwrap();
    for k in 0..=50 {
        for i in 0..5 {
            assert_eq!(tr.state(i, k), &[0.1037, 0.8396]);
        }
    }
    let lim = simulate_limit(&spec, &law, &noise, 0, 3).unwrap();
    assert!(lim.states[0].chunks(2).all(|v| v == [0.1037, 0.8396]));
}

#[test]
fn single_agent_average_is_the_agent() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(4, 1, 1, 200, 1.0);
    let tr = simulate_population(&spec, &law, &noise, 0).unwrap();
    for k in 0..=200 {
        assert_eq!(tr.xbar(k), tr.state(0, k));
        assert_eq!(tr.ubar(k), tr.control(0, k));
    }
}

#[test]
fn empirical_mean_is_arithmetic_mean() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(4, 1, 7, 100, 1.0);
    let tr = simulate_population(&spec, &law, &noise, 0).unwrap();
    for k in [0, 50, 100] {
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..7 {
                s += tr.state(i, k)[j];
            }
            assert_eq!(tr.xbar(k)[j], s * (1.0 / 7.0));
        }
    }
    for i in 0..7 {
        assert_eq!(tr.state(i, 0), spec.x0.as_slice());
    }
}

#[test]
fn limit_without_idiosyncratic_noise_tracks_mean() {
    let mut c = paper_spec().to_candidate();
    for s in [
        &mut c.coeffs.c,
        &mut c.coeffs.d,
        &mut c.coeffs.c_bar,
        &mut c.coeffs.d_bar,
    ] {
        *s = MatrixSchedule::zeros(2, 2);
    }
    c.coeffs.c0 = MatrixSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, -0.1]));
    definite_weights(&mut c);
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(8, 1, 1, 500, 1.0);
    let tr = simulate_limit(&spec, &law, &noise, 0, 0).unwrap();
    for k in 0..=500 {
        let (x, m) = (tr.state(0, k), tr.mean_process.at(k));
        for j in 0..2 {
            assert!((x[j] - m[j]).abs() <= 1e-12 * (1.0 + m[j].abs()));
        }
    }
}

#[test]
fn limit_population_average_matches_mean_process() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let count = 10_000;
    let noise = NoiseBundle::new(21, 1, count, 2000, 1.0);
    let tr = simulate_limit_agents(&spec, &law, &noise, 0, count).unwrap();
    let m = tr.mean_process.terminal();
    for j in 0..2 {
        let vals: Vec<f64> = (0..count).map(|i| tr.state(i, 2000)[j]).collect();
        let est = CostEstimate::from_samples(CostTag::McLimit, &vals).unwrap();
        assert!(
            (est.mean - m[j]).abs() <= 3.0 * est.stderr,
            "{j}: {} vs {}",
            est.mean,
            m[j]
        );
    }
}

#[test]
fn deterministic_path_costs_are_exact() {
    let mut c = ProblemCandidate::zeros(2, 2, 1.0, 50);
    c.x0 = vec![0.3, -0.7];
    c.weights.g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    c.weights.gamma2 = DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.5, 0.5]);
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let k = DMatrix::identity(2, 2) - &spec.weights.gamma2;
    let z = &k * nalgebra::DVector::from_vec(spec.x0.clone());
    let expected = 0.5 * (z.transpose() * &spec.weights.g * &z)[(0, 0)];

    let noise = NoiseBundle::new(1, 4, 2, 64, 1.0);
    let costs = population_costs(&spec, &law, &noise).unwrap();
    for tag in [CostTag::MgIndividual, CostTag::MtPerAgent] {
        let est = summarize_population(&costs, 1, tag).unwrap();
        assert!((est.mean - expected).abs() <= 1e-15 * expected);
        assert_eq!(est.stderr, 0.0);
    }
    let social = summarize_population(&costs, 0, CostTag::MtSocial).unwrap();
    assert!((social.mean - 2.0 * expected).abs() <= 1e-15 * expected);
    let lim = estimate_cost_limit(&spec, &law, 8, 3, 64).unwrap();
    assert!((lim.mean - expected).abs() <= 1e-15 * expected);
    assert_eq!(lim.stderr, 0.0);
}

#[test]
fn full_tracking_identical_agents_cost_nothing() {
    let mut c = ProblemCandidate::zeros(2, 2, 1.0, 50);
    c.coeffs.a = MatrixSchedule::constant(DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.2]));
    c.coeffs.c0 = MatrixSchedule::constant(DMatrix::identity(2, 2) * 0.3);
    c.x0 = vec![1.0, 2.0];
    c.weights.q = MatrixSchedule::constant(DMatrix::identity(2, 2));
    c.weights.g = DMatrix::identity(2, 2);
    c.weights.gamma1 = MatrixSchedule::constant(DMatrix::identity(2, 2));
    c.weights.gamma2 = DMatrix::identity(2, 2);
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let zero = FeedbackLaw {
        theta_mean: law.theta_mean.iter().map(|g| g * 0.0).collect(),
        theta_dev: law.theta_dev.iter().map(|g| g * 0.0).collect(),
        ..law
    };
    let noise = NoiseBundle::new(5, 3, 2, 100, 1.0);
    let costs = population_costs(&spec, &zero, &noise).unwrap();
    assert!(costs.iter().flatten().all(|&c| c == 0.0));
}

#[test]
fn stored_and_streamed_costs_agree() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(13, 3, 6, 300, 1.0);
    let streamed = population_costs(&spec, &law, &noise).unwrap();
    let stored: Vec<PopulationTrajectory> = (0..3)
        .map(|r| simulate_population(&spec, &law, &noise, r).unwrap())
        .collect();
    for (r, tr) in stored.iter().enumerate() {
        assert_eq!(trajectory_costs(&spec, tr), streamed[r]);
    }
    let a = estimate_cost_population(&spec, &stored, 2, CostTag::MgIndividual).unwrap();
    let b = summarize_population(&streamed, 2, CostTag::MgIndividual).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        estimate_cost_population(&spec, &[], 0, CostTag::MtSocial),
        Err(Error::InsufficientReplications(0))
    ));
}

#[test]
fn estimates_need_two_replications() {
    assert!(matches!(
        CostEstimate::from_samples(CostTag::McLimit, &[1.0]),
        Err(Error::InsufficientReplications(1))
    ));
    let e = CostEstimate::from_samples(CostTag::McLimit, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(e.mean, 2.5);
    assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
}

#[test]
fn mc_value_quadratic_form() {
    let spec = paper_spec();
    let set = solve_all(&spec, TimeGrid::new(1.0, 20)).unwrap();
    assert_eq!(mc_value(&set.p2, &[0.0, 0.0]), 0.0);
    let mut p2 = set.p2.clone();
    p2.p[0] = DMatrix::identity(2, 2);
    assert_eq!(mc_value(&p2, &[3.0, 4.0]), 12.5);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(77, 12, 8, 200, 1.0);
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| population_costs(&spec, &law, &noise).unwrap())
    };
    let one = run_with(1);
    assert_eq!(one, run_with(3));
    assert_eq!(one, population_costs(&spec, &law, &noise).unwrap());
}

struct MeanCapture(Vec<f64>, Vec<f64>);

impl Observer for MeanCapture {
    fn observe(&mut self, _: &SimPlan, v: &StepView<'_>) {
        self.0.extend_from_slice(v.xbar);
        self.1.extend_from_slice(v.ubar);
    }
}

#[test]
fn exchangeable_agents() {
    let spec = paper_spec();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(31, 1, 5, 400, 1.0);
    let plan = SimPlan::new(&spec, &law, 400).unwrap();
    let order = [0usize, 1, 2, 3, 4];
    let perm = [3usize, 0, 4, 1, 2];
    let base = replication_costs(&plan, &noise, 0, &order, Coupling::Empirical).unwrap();
    let permuted = replication_costs(&plan, &noise, 0, &perm, Coupling::Empirical).unwrap();
    for (slot, &agent) in perm.iter().enumerate() {
        assert!((permuted[slot] - base[agent]).abs() <= 1e-12 * (1.0 + base[agent].abs()));
    }
    let social: f64 = base.iter().sum();
    let social_p: f64 = permuted.iter().sum();
    assert!((social - social_p).abs() <= 1e-12 * (1.0 + social.abs()));

    let mut a = MeanCapture(Vec::new(), Vec::new());
    let mut b = MeanCapture(Vec::new(), Vec::new());
    run(&plan, &noise, 0, &order, Coupling::Empirical, &mut a).unwrap();
    run(&plan, &noise, 0, &perm, Coupling::Empirical, &mut b).unwrap();
    for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn common_random_numbers_reduce_gap_variance() {
    let spec = paper_spec();
    let (mc, mg) = laws(&spec);
    let (reps, agents, steps) = (200, 4, 400);
    let shared = NoiseBundle::new(5, reps, agents, steps, 1.0);
    let other = NoiseBundle::new(6, reps, agents, steps, 1.0);
    let per_agent = |costs: Vec<Vec<f64>>| -> Vec<f64> {
        costs
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    };
    let a = per_agent(population_costs(&spec, &mc, &shared).unwrap());
    let b = per_agent(population_costs(&spec, &mg, &shared).unwrap());
    let c = per_agent(population_costs(&spec, &mg, &other).unwrap());
    let var = |d: Vec<f64>| {
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let crn = var(a.iter().zip(&b).map(|(x, y)| y - x).collect());
    let indep = var(a.iter().zip(&c).map(|(x, y)| y - x).collect());
    assert!(crn < indep, "{crn} vs {indep}");
}

#[test]
fn empirical_mean_converges_at_root_n() {
    let mut c = paper_spec().to_candidate();
    for s in [
        &mut c.coeffs.a_bar,
        &mut c.coeffs.b_bar,
        &mut c.coeffs.c_bar,
        &mut c.coeffs.d_bar,
        &mut c.coeffs.d,
        &mut c.coeffs.d0,
        &mut c.coeffs.c0,
    ] {
        *s = MatrixSchedule::zeros(2, 2);
    }
    definite_weights(&mut c);
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let (reps, steps) = (200, 200);
    let plan = SimPlan::new(&spec, &law, steps).unwrap();
    struct Terminal(Vec<f64>);
    impl Observer for Terminal {
        fn observe(&mut self, _: &SimPlan, v: &StepView<'_>) {
            if v.terminal {
                let d: f64 = v
                    .xbar
                    .iter()
                    .zip(v.mean)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                self.0.push(d.sqrt());
            }
        }
    }
    let ns = [4usize, 16, 64, 256];
    let mut logs = Vec::new();
    for &n in &ns {
        let noise = NoiseBundle::new(17, reps, n, steps, 1.0);
        let agents: Vec<usize> = (0..n).collect();
        let mut obs = Terminal(Vec::new());
        for rep in 0..reps {
            run(&plan, &noise, rep, &agents, Coupling::Empirical, &mut obs).unwrap();
        }
        let mean = obs.0.iter().sum::<f64>() / reps as f64;
        logs.push(mean.ln());
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let (slope, _, _) = crate::linalg::linear_fit(&x, &logs);
    assert!((slope + 0.5).abs() <= 0.2, "slope {slope}");
}

#[test]
fn unstable_dynamics_report_blowup() {
    let mut c = ProblemCandidate::zeros(1, 1, 1.0, 20);
    c.coeffs.a = MatrixSchedule::constant(DMatrix::from_element(1, 1, 200.0));
    c.x0 = vec![1.0];
    let spec = c.validate().unwrap();
    let (law, _) = laws(&spec);
    let noise = NoiseBundle::new(1, 1, 2, 100, 1.0);
    assert!(matches!(
        simulate_population(&spec, &law, &noise, 0),
        Err(Error::Blowup { .. })
    ));
    assert!(max_norm(&law.theta_dev[0]) == 0.0);
}
