use std::path::Path;
use std::process::{Command, Output};

use kkflow_core::energy::fit_decay_rate;

fn kkflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kkflow")).args(args).output().expect("spawn kkflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn diagnostic(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("json diagnostic on stderr");
    serde_json::from_str(line).unwrap()
}

fn columns(csv: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(csv).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[i]).collect()
}

fn run_scenario(dir: &Path, name: &str, text: &str, extra: &[&str]) -> Output {
    let sc = dir.join(format!("{}.txt", name));
    std::fs::write(&sc, text).unwrap();
    let out = dir.join(name);
    let mut args = vec!["run", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kkflow(&args)
}

#[test]
fn milne_run_has_vanishing_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_scenario(dir.path(), "milne", "preset = milne\ngrid.dims = 8\ntime.t_final = 0.3\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base = dir.path().join("milne");
    for f in ["timeseries.csv", "solver_log.csv", "final_snapshot.txt"] {
        assert!(base.join(f).exists(), "{} missing", f);
    }
    let (h, rows) = columns(&base.join("timeseries.csv"));
    assert!(rows.len() >= 2);
    for name in ["ham_res_L2", "ham_res_Linf", "mom_res_L2"] {
        assert!(column(&h, &rows, name).iter().all(|x| x.abs() <= 1e-10), "{}", name);
    }
}

#[test]
fn positive_tau0_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_scenario(dir.path(), "bad", "preset = milne\nmodel.tau0 = 1\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostic(&o);
    assert_eq!(d["exit_code"], 1);
    assert!(d["message"].as_str().unwrap().contains("model.tau0"));
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_scenario(dir.path(), "typo", "preset = milne\n\ngrid.dimz = 8\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    let d = diagnostic(&o);
    assert_eq!(d["error"], "parse");
    assert!(d["message"].as_str().unwrap().contains("line 3"));
}

#[test]
fn brans_dicke_energy_decays_at_rate_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_scenario(dir.path(), "bd", "preset = brans-dicke-homogeneous\ngrid.dims = 4\n", &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = columns(&dir.path().join("bd").join("timeseries.csv"));
    let fit = fit_decay_rate(&column(&h, &rows, "T"), &column(&h, &rows, "E_phi"), Some((1.0, 5.0))).unwrap();
    assert!((fit.exponent + 4.0).abs() <= 0.2, "exponent {}", fit.exponent);
}

#[test]
fn identical_inputs_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let text = "preset = full-kk\ngrid.dims = 6\ntime.t_final = 0.1\n";
    let a = run_scenario(dir.path(), "a", text, &["--seed", "7"]);
    let b = run_scenario(dir.path(), "b", text, &["--seed", "7"]);
    assert!(a.status.success() && b.status.success());
    let read = |n: &str| std::fs::read(dir.path().join(n).join("timeseries.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let c = run_scenario(dir.path(), "c", text, &["--seed", "8"]);
    assert!(c.status.success());
    assert_ne!(read("a"), read("c"));
}

#[test]
fn snapshots_follow_the_requested_interval() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_scenario(dir.path(), "s", "preset = milne\ngrid.dims = 4\ntime.dt = 0.01\ntime.t_final = 0.05\n", &["--snapshot-every", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base = dir.path().join("s");
    assert!(base.join("snapshot_000002.txt").exists());
    assert!(base.join("snapshot_000004.txt").exists());
    assert!(!base.join("snapshot_000003.txt").exists());
}

#[test]
fn gauge_test_meets_tolerance_and_is_deterministic() {
    let a = kkflow(&["gauge-test", "--grid", "16", "--seed", "4"]);
    let b = kkflow(&["gauge-test", "--grid", "16", "--seed", "4"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    let r: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    assert!(r["div_l2"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn gauge_test_of_zero_field_is_zero() {
    let o = kkflow(&["gauge-test", "--grid", "8", "--zero"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["max_A"].as_f64(), Some(0.0));
}

#[test]
fn ode_demo_prints_two_thirds() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ode.csv");
    let o = kkflow(&["ode-demo", "--lambda", "0.2222222222222222", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert!((r["rate"].as_f64().unwrap() + 2.0 / 3.0).abs() <= 1e-6);
    let (h, _) = columns(&csv);
    assert_eq!(h, ["T", "X", "Xdot", "E", "E_exact"]);
}

#[test]
fn ode_demo_rejects_one_ninth() {
    let o = kkflow(&["ode-demo", "--lambda0", "0.1111111111111111"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(diagnostic(&o)["error"], "domain");
}

#[test]
fn convergence_reports_second_and_fourth_order() {
    let o = kkflow(&["convergence", "--levels", "3"]);
    assert!(o.status.success());
    let json = stdout(&o).lines().find(|l| l.starts_with('{')).unwrap().to_string();
    let r: serde_json::Value = serde_json::from_str(&json).unwrap();
    for s in r["operators"].as_array().unwrap() {
        for o in s["orders"].as_array().unwrap() {
            assert!((1.8..=2.2).contains(&o.as_f64().unwrap()), "{}", s);
        }
    }
    let rk = r["integrator"]["orders"].as_array().unwrap().last().unwrap().as_f64().unwrap();
    assert!((3.6..=4.4).contains(&rk), "rk4 order {}", rk);
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = kkflow(&["run", "--nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(diagnostic(&o)["error"], "usage");
}
