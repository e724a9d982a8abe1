use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use twoscale_cli::experiment::relative_error_from_csv;

fn twoscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoscale")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_record(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"{{
  "mdp": {{ "preset": "chain3" }},
  "target": "greedy-on-action-1",
  "reward_noise": 0.5,
  "horizon": 20000,
  "thinning": 100,
  "tracking": {{ "anchors": [100, 1000] }},
  "audit": {{ "points": 3, "draws": 2000, "lipschitz_pairs": 20 }}{extra}
}}"#
    );
    let path = dir.join("exp.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bad_schedule_is_rejected_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = twoscale(&["validate", "--config", "bad_schedule"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL schedule a(n)/b(n) -> 0"));
    assert_eq!(error_record(&o)["error"], "validation");

    let o = twoscale(&["run", "--config", "bad_schedule", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn five_seeds_give_five_trajectories_and_one_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = twoscale(&["run-tdc", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut csvs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("seed_") && !n.ends_with("_decades.csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs, ["seed_0.csv", "seed_1.csv", "seed_2.csv", "seed_3.csv", "seed_4.csv"]);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 5);
    assert_eq!(summary["config"]["horizon"], 20000);
    // defaults are materialized
    assert_eq!(summary["config"]["divergence_bound"], 1e6);
    assert_eq!(summary["config"]["schedule"]["fast"]["relative"]["exponent"], 0.6);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = twoscale(&["run", "--config", &cfg, "--out", dir.to_str().unwrap(), "--seeds", "0,7"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for name in names {
        let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        if name == "summary.json" {
            let strip = |v: Vec<u8>| {
                String::from_utf8(v).unwrap().replace(a.to_str().unwrap(), "").replace(b.to_str().unwrap(), "")
            };
            assert_eq!(strip(x), strip(y));
        } else {
            assert_eq!(x, y, "{name:?} differs");
        }
    }
}

#[test]
fn summary_matches_recomputation_from_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let o = twoscale(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    let oracle = read_json(&out.join("oracle.json"));
    let theta_star: Vec<f64> = serde_json::from_value(oracle["theta_star"].clone()).unwrap();
    assert_eq!(summary["theta_star"], oracle["theta_star"]);
    for seed in summary["seeds"].as_array().unwrap() {
        let csv = fs::read_to_string(out.join(seed["trajectory_csv"].as_str().unwrap())).unwrap();
        let rel = relative_error_from_csv(&csv, &theta_star).unwrap();
        assert_eq!(rel, seed["final_relative_error"].as_f64().unwrap());
        let last = csv.lines().last().unwrap();
        let coupling: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(coupling, seed["final_coupling_error"].as_f64().unwrap());
        assert_eq!(last.split(',').next().unwrap(), "20000");

        let decades = fs::read_to_string(out.join(seed["decades_csv"].as_str().unwrap())).unwrap();
        let rows: Vec<(u64, f64)> = decades
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap())
            })
            .collect();
        let reported: Vec<(u64, f64)> = seed["decade_medians"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| (d["decade"].as_u64().unwrap(), d["median"].as_f64().unwrap()))
            .collect();
        assert_eq!(rows, reported);
    }
    let tracking = fs::read_to_string(out.join("tracking.csv")).unwrap();
    let errors: Vec<f64> = tracking.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let reported: Vec<f64> =
        summary["ode"]["tracking"].as_array().unwrap().iter().map(|p| p["error"].as_f64().unwrap()).collect();
    assert_eq!(errors, reported);
    assert_eq!(errors.len(), 2);
    assert!(fs::read_to_string(out.join("ode_slow.csv")).unwrap().starts_with("t,x_0,x_1,x_2\n"));
    assert!(read_json(&out.join("audit.json"))["martingale"].as_array().unwrap().len() == 3);
}

#[test]
fn oracle_prints_the_td_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = twoscale(&["oracle", "--config", "chain3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("theta* = [2.988930, 3.321033, 3.690037]"), "{text}");
    assert!(text.contains("C^-1 A[0] = [1.000000, -0.900000, 0.000000]"), "{text}");
    assert!(text.contains("cond(A)"));
    assert!(out.join("oracle.json").is_file());
    assert!(!out.join("seed_0.csv").exists());
}

#[test]
fn walk_demo_minima_stay_shallow() {
    let o = twoscale(&["walk-demo", "--p", "0.9", "--horizon", "100000", "--seeds", "100"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mins: Vec<i64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(mins.len(), 100);
    assert!(mins.iter().all(|&m| (-20..=0).contains(&m)));

    let o = twoscale(&["walk-demo", "--p", "0.4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_three_after_writing_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let hot = r#",
  "schedule": {
    "slow": { "power-law": { "scale": 1e6, "offset": 1.0, "exponent": 1.0 } },
    "fast": { "power-law": { "scale": 1e6, "offset": 1.0, "exponent": 0.6 } }
  },
  "theta0": [1.0, 1.0, 1.0],
  "pipelines": { "ode": false, "audit": false }"#;
    let cfg = small_config(tmp.path(), hot);
    let out = tmp.path().join("out");
    let o = twoscale(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"], "divergence");
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["seeds"][0]["divergence"].is_object());
    assert_eq!(summary["passed"], false);
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(twoscale(&["run-tdc"]).status.code(), Some(2));
    assert_eq!(twoscale(&["frobnicate"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "horizn": 5"#);
    let o = twoscale(&["validate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("horizn"));
    let cfg = small_config(tmp.path(), r#", "theta0": [1.0]"#);
    assert_eq!(twoscale(&["validate", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_four() {
    let o = twoscale(&["validate", "--config", "/nonexistent/exp.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_record(&o)["error"], "io");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("out");
    let o = twoscale(&["oracle", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn mdp_sources_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let mdp = twoscale::FiniteMdp::chain3().to_json();
    fs::write(tmp.path().join("chain.json"), &mdp).unwrap();
    let file_cfg = r#"{ "mdp": { "file": "chain.json" }, "target": "greedy-on-action-1" }"#;
    fs::write(tmp.path().join("f.json"), file_cfg).unwrap();
    let inline_cfg = format!(r#"{{ "mdp": {{ "inline": {mdp} }}, "target": "greedy-on-action-1" }}"#);
    fs::write(tmp.path().join("i.json"), inline_cfg).unwrap();
    let gen_cfg = r#"{ "mdp": { "generator": { "n_states": 4, "n_actions": 2, "sparsity": { "fraction": 0.5 }, "seed": 3 } },
                      "target": [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]],
                      "features": { "kind": "random", "dim": 2, "seed": 1 } }"#;
    fs::write(tmp.path().join("g.json"), gen_cfg).unwrap();
    let mut thetas = Vec::new();
    for name in ["f.json", "i.json"] {
        let o = twoscale(&[
            "oracle",
            "--config",
            tmp.path().join(name).to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        thetas.push(stdout(&o).lines().next().unwrap().to_string());
    }
    assert_eq!(thetas[0], thetas[1]);
    let o = twoscale(&["validate", "--config", tmp.path().join("g.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("4 states, 2 actions, 2 features"));
}

#[test]
fn bundled_chain3_passes_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("chain3");
    let o = twoscale(&["run", "--config", "chain3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["passed"], true, "{}", stdout(&o));
    for seed in summary["seeds"].as_array().unwrap() {
        assert!(seed["final_relative_error"].as_f64().unwrap() < 0.05);
    }
    assert!(summary["audit"].as_array().unwrap().iter().all(|row| row["passed"] == true));
}
