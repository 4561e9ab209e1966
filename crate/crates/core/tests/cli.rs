use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;

use mflq::model::{problem_to_json, MatrixSchedule, ProblemCandidate};

fn mflq(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mflq"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("MFLQ_THREADS", t),
        None => cmd.env_remove("MFLQ_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_problem(dir: &Path, c: ProblemCandidate) -> String {
    let path = dir.join("problem.json");
    fs::write(&path, problem_to_json(&c.validate().unwrap())).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn negative_control_weight_is_irregular() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ProblemCandidate::zeros(2, 2, 1.0, 100);
    c.weights.r = MatrixSchedule::constant(-DMatrix::identity(2, 2));
    let problem = write_problem(dir.path(), c);
    let out_dir = dir.path().join("out");
    let out = mflq(
        &[
            "riccati",
            "--problem",
            &problem,
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regularity"));
    // The traces and the report are still written for inspection.
    assert!(out_dir.join("re1.csv").exists());
    assert!(out_dir.join("regularity.json").exists());
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let missing = mflq(
        &["riccati", "--problem", "/nonexistent.json", "--out", out],
        None,
    );
    assert_eq!(code(&missing), 2);

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    let g = mflq(
        &[
            "riccati",
            "--problem",
            garbage.to_str().unwrap(),
            "--out",
            out,
        ],
        None,
    );
    assert_eq!(code(&g), 2);

    let asym = dir.path().join("asym.json");
    fs::write(
        &asym,
        r#"{"dims": {"n": 1, "m": 1, "T": 1.0, "n_t": 10}, "x0": [1.0],
            "weights": {"Q": [[1.0, 0.0]], "R": [[1.0]], "G": [[1.0]]}}"#,
    )
    .unwrap();
    let a = mflq(
        &["riccati", "--problem", asym.to_str().unwrap(), "--out", out],
        None,
    );
    assert_eq!(code(&a), 2);
    assert!(String::from_utf8_lossy(&a.stderr).contains("weights.Q"));

    assert_eq!(code(&mflq(&["compare", "--M", "1", "--out", out], None)), 2);
    assert_eq!(code(&mflq(&["frobnicate"], None)), 2);
    assert_eq!(code(&mflq(&["riccati", "--out", out], Some("zero"))), 2);
}

#[test]
fn riccati_writes_traces_and_gains() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = mflq(
        &["riccati", "--nt", "200", "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "re1.csv",
        "re2.csv",
        "re3.csv",
        "gains_mc_mt.csv",
        "gains_mg.csv",
    ] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(text.lines().count(), 202, "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("regularity.json")).unwrap()).unwrap();
    for eq in report["equations"].as_array().unwrap() {
        assert_eq!(eq["pass"], true);
    }
}

#[test]
fn simulate_writes_costs_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = mflq(
        &[
            "simulate",
            "--N",
            "3,5",
            "--M",
            "8",
            "--sde-steps",
            "50",
            "--trajectory",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let costs = fs::read_to_string(out.join("costs.csv")).unwrap();
    let rows: Vec<&str> = costs.lines().collect();
    assert_eq!(rows[0], "problem_tag,N,M,mean,stderr");
    assert!(rows[1].starts_with("MT_social,3,8,"));
    assert!(rows[2].starts_with("MT_per_agent,3,8,"));
    assert!(rows[5].starts_with("MC_limit,,8,"));
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "t,agent,x_1,x_2,u_1,u_2");
    assert_eq!(traj.lines().count(), 1 + 51 * 3);
}

#[test]
fn convergence_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = mflq(
            &[
                "convergence",
                "--problem",
                "builtin:paper",
                "--seed",
                "7",
                "--N",
                "2,4,8",
                "--M",
                "20",
                "--sde-steps",
                "100",
                "--out",
                out.to_str().unwrap(),
            ],
            Some(threads),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(out.join("convergence.csv")).unwrap(),
            fs::read(out.join("convergence.json")).unwrap(),
        )
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "3"));
}
