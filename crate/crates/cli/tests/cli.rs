use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdv-backstep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn prefix(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn kernel_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "k");
    let o = run(&["kernel", "--grid", "41", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for artifact in ["kernel_k.csv", "kernel_p.csv", "feedback_row.csv", "injection_gain.csv", "kernel_residual.json"] {
        assert!(dir.path().join(format!("k_{artifact}")).exists(), "{artifact}");
    }
    let k = fs::read_to_string(dir.path().join("k_kernel_k.csv")).unwrap();
    assert!(k.starts_with("# L=1 lambda=1 n=41 residual="));
    assert_eq!(k.lines().nth(1), Some("x,y,value"));
}

#[test]
fn kernel_output_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "r");
    let read = || fs::read(dir.path().join("r_kernel_k.csv")).unwrap();
    assert!(run(&["kernel", "--grid", "31", "--out", &out]).status.success());
    let first = read();
    assert!(run(&["kernel", "--grid", "31", "--out", &out]).status.success());
    assert_eq!(first, read());
}

#[test]
fn simulate_reports_decay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "L = 1\nlambda = 1\nn = 61\nT = 1\n").unwrap();
    let out = prefix(dir.path(), "sim");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim_summary.json")).unwrap()).unwrap();
    for key in ["lambda", "lambda_fit", "D", "A", "B", "max_real_eig", "slack_min"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    assert!(summary["lambda_fit"].as_f64().unwrap() >= 0.9);
    let diag = fs::read_to_string(dir.path().join("sim_diagnostics.csv")).unwrap();
    assert_eq!(
        diag.lines().next(),
        Some("t,norm_u,norm_uhat,norm_err,H3_u,y,V1,V2,V3,V,trace_lhs,trace_rhs")
    );
    let traj = fs::read_to_string(dir.path().join("sim_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("t,x,u,uhat"));
}

#[test]
fn zero_initial_condition_gives_zero_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("zero.csv");
    fs::write(&csv, "x,value\n0,0\n1,0\n").unwrap();
    let cfg = dir.path().join("zero.cfg");
    fs::write(&cfg, "n = 31\nT = 0.2\ninitial_condition = custom_csv\nic_csv = zero.csv\n").unwrap();
    let out = prefix(dir.path(), "z");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let traj = fs::read_to_string(dir.path().join("z_trajectory.csv")).unwrap();
    for line in traj.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!((cols[2], cols[3]), (0.0, 0.0));
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "initial_condition = stationary_2pi\nL = 1\n").unwrap();
    let o = run(&["kernel", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`L`"));
    let o = run(&["kernel", "--lambda", "-1", "--out", &prefix(dir.path(), "x")]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["kernel", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tight.cfg");
    fs::write(&cfg, "n = 21\nkernel_tol = 1e-30\n").unwrap();
    let o = run(&["kernel", "--config", cfg.to_str().unwrap(), "--out", &prefix(dir.path(), "t")]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_aggregate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "s");
    let o = run(&["sweep", "--grid", "41", "--lambda-list", "0.5,1,2", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(dir.path().join("s_sweep.csv")).unwrap();
    let rows: Vec<Vec<String>> = agg.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    let fits: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for w in fits.windows(2) {
        assert!(w[1] >= 0.9 * w[0]);
    }
    assert!(rows.iter().all(|r| r[3] == "ok"));
}

#[test]
fn empty_sweep_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "e");
    let o = run(&["sweep", "--lambda-list", "", "--out", &out]);
    assert!(o.status.success());
    let agg = fs::read_to_string(dir.path().join("e_sweep.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1);
}

#[test]
fn duplicate_sweep_entries_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "d");
    assert!(run(&["sweep", "--grid", "31", "--lambda-list", "1,1", "--out", &out]).status.success());
    let a = fs::read_to_string(dir.path().join("d_sweep0_summary.json")).unwrap();
    let b = fs::read_to_string(dir.path().join("d_sweep1_summary.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn spectrum_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = prefix(dir.path(), "sp");
    let o = run(&["spectrum", "--grid", "41", "--out", &out]);
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sp_spectrum.json")).unwrap()).unwrap();
    assert_eq!(summary["count"].as_u64(), Some(78));
    assert!(summary["max_real_eig"].as_f64().unwrap() < -0.9);
}

#[test]
fn open_loop_stationary_profile_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stat.cfg");
    fs::write(&cfg, "L = 6.283185307179586\ninitial_condition = stationary_2pi\nn = 61\nT = 2\n").unwrap();
    let out = prefix(dir.path(), "st");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--open-loop", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diag = fs::read_to_string(dir.path().join("st_diagnostics.csv")).unwrap();
    let norms: Vec<f64> = diag.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    for v in &norms {
        assert!((v / norms[0] - 1.0).abs() < 0.01);
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["simulate", "--lamda", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
