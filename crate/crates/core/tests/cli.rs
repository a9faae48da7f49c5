//! Command-line behaviour: exit codes and output files.

use std::path::Path;
use std::process::{Command, Output};

use vilqr::output::{read_error_table, read_trajectory, ERROR_TABLE_HEADER};

// starting near upright keeps the oracle cheap
const SMALL: &str = "\
x0 = 0.04, 0
trajopt.dt_list = 0.02, 0.05
trajopt.n_iter = 10
mpc.dt_list = 0.05
mpc.n_iter_list = 1, 2
mpc.sim_time = 0.5
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vilqr")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["sweep", "--help"])), 0);
}

#[test]
fn usage_errors_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["trajopt", "--out", out])), 1);
    assert_eq!(code(&run(&["trajopt", "--config", &cfg, "--out", out, "--backend", "rk4"])), 1);
    assert_eq!(code(&run(&["simulate", "--config", &cfg, "--out", out])), 1);
}

#[test]
fn bad_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let missing = dir.path().join("missing.cfg");
    assert_eq!(code(&run(&["mpc", "--config", missing.to_str().unwrap(), "--out", out])), 1);
    for text in ["pendulum.mass = 1", "mpc.dt = -0.1", "x0 = 1, 2, 3", "cost.R = 0", "trajopt.n_iter = 0", "x0 = 0\nx0 = 1"] {
        let cfg = config(dir.path(), text);
        let res = run(&["trajopt", "--config", &cfg, "--out", out]);
        assert_eq!(code(&res), 1, "{text}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

#[test]
fn diverging_solve_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "x0 = 0, 1e300\ntrajopt.dt_list = 0.05\ntrajopt.n_iter = 2\n");
    let out = dir.path().join("out");
    let res = run(&["trajopt", "--config", &cfg, "--out", out.to_str().unwrap(), "--backend", "euler"]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn trajopt_writes_trajectories_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let res = run(&["trajopt", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for backend in ["euler", "variational"] {
        for (dt, samples) in [("0.02", 41), ("0.05", 17)] {
            let traj = read_trajectory(&out.join(format!("trajectory_{backend}_dt{dt}.csv"))).unwrap();
            assert_eq!(traj.times.len(), samples);
        }
    }
    assert!(first_line(&out.join("summary.csv")).ends_with(",status,provenance"));
    assert!(out.join("cost_history.csv").exists());
}

#[test]
fn backend_flag_restricts_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let res = run(&["mpc", "--config", &cfg, "--out", out.to_str().unwrap(), "--backend", "variational"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("closed_loop_variational.csv").exists());
    assert!(!out.join("closed_loop_euler.csv").exists());
    assert_eq!(first_line(&out.join("closed_loop_variational.csv")), "k,t,x1,x2,u,iter_time_mean");
    // one header plus one row for the single backend
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 2);
}

#[test]
fn sweep_and_oracle_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("sweep");
    let res = run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(first_line(&out.join("error_table.csv")), ERROR_TABLE_HEADER.join(","));
    let table = read_error_table(&out.join("error_table.csv")).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.mse.is_some_and(|m| m >= 0.0)));

    let file = dir.path().join("nested").join("oracle.csv");
    let res = run(&["oracle", "--config", &cfg, "--out", file.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let reference = read_trajectory(&file).unwrap();
    assert_eq!(reference.times[1], 1e-3);
    assert!((reference.states[0][0] - 0.04).abs() < 1e-4);
}
