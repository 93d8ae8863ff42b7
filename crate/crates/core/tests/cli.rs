mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::configs_dir;
use parplan::report::Report;
use parplan::types::{
    load_cluster, load_model, load_profile, save_json, validate_strategy, ProfileTable,
};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_parplan"))
}

fn inputs(scenario: &str, profile: Option<&Path>) -> Vec<String> {
    let dir = configs_dir().join(scenario);
    let profile = profile.map_or_else(|| dir.join("profile.json"), Path::to_path_buf);
    let gbs = if scenario == "hetero_model" {
        "64"
    } else {
        "32"
    };
    vec![
        "--model".into(),
        dir.join("model.json").display().to_string(),
        "--cluster".into(),
        dir.join("cluster.json").display().to_string(),
        "--profile".into(),
        profile.display().to_string(),
        "--gbs".into(),
        gbs.into(),
    ]
}

fn run(cmd: &str, scenario: &str, profile: Option<&Path>, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .args(inputs(scenario, profile))
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_writes_a_revalidating_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("report.json");
    let o = run(
        "plan",
        "homogeneous",
        None,
        &["--budget", "10", "--out", path_str(&out)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rank"));

    let report = Report::<f64>::load(&out).unwrap();
    assert!(!report.candidates.is_empty());
    assert_eq!(
        report
            .candidates
            .iter()
            .filter(|c| c.simulated.is_some())
            .count(),
        10
    );
    let dir = configs_dir().join("homogeneous");
    let model = load_model::<f64>(&dir.join("model.json")).unwrap();
    let cluster = load_cluster::<f64>(&dir.join("cluster.json")).unwrap();
    for c in &report.candidates {
        assert!(
            validate_strategy(&c.strategy, &model, &cluster, 32).is_empty(),
            "rank {}",
            c.rank
        );
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let first = &v["candidates"][0];
    for key in [
        "rank",
        "degrees",
        "placement",
        "mbs",
        "assignment",
        "estimated",
        "simulated",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for key in ["total", "pipeline_time", "dpsync_time"] {
        assert!(
            first["estimated"].get(key).is_some(),
            "missing estimated.{key}"
        );
    }
}

fn profile_without_layer(dir: &Path, layer: usize) -> PathBuf {
    let mut profile: ProfileTable<f64> =
        load_profile(&configs_dir().join("homogeneous/profile.json")).unwrap();
    profile.remove_layer(layer);
    let path = dir.join("partial.json");
    save_json(&path, &profile).unwrap();
    path
}

#[test]
fn profile_miss_without_fallback_exits_with_its_own_status() {
    let tmp = tempfile::tempdir().unwrap();
    let partial = profile_without_layer(tmp.path(), 5);
    let out = tmp.path().join("r.json");
    let o = run(
        "plan",
        "homogeneous",
        Some(&partial),
        &["--out", path_str(&out)],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(
        err.contains("profile-miss") && err.contains("layer=5"),
        "{err}"
    );
    assert!(!out.exists());
}

#[test]
fn fallback_fills_profile_misses() {
    let tmp = tempfile::tempdir().unwrap();
    let partial = profile_without_layer(tmp.path(), 5);
    let out = tmp.path().join("r.json");
    let o = run(
        "plan",
        "homogeneous",
        Some(&partial),
        &["--fallback-flops", "8e12", "--out", path_str(&out)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists());
}

#[test]
fn zero_budget_is_a_usage_error() {
    let o = run("plan", "homogeneous", None, &["--budget", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn anneal_is_reproducible_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    let trace = tmp.path().join("anneal.jsonl");
    for (out, extra) in [(&a, vec!["--trace", path_str(&trace)]), (&b, vec![])] {
        let mut args = vec!["--seed", "11", "--iterations", "80", "--out", path_str(out)];
        args.extend(extra);
        let o = run("anneal", "hetero_cluster", None, &args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let lines = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(lines.lines().count(), 80);
    let steps: Vec<serde_json::Value> = lines
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let best: Vec<f64> = steps
        .iter()
        .map(|s| s["best_cost"].as_f64().unwrap())
        .collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn anneal_single_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a.json");
    let o = run(
        "anneal",
        "homogeneous",
        None,
        &["--iterations", "1", "--out", path_str(&out)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = Report::<f64>::load(&out).unwrap();
    assert!((1..=2).contains(&report.candidates.len()));
}

#[test]
fn simulate_report_entry_with_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.json");
    assert!(
        run("plan", "hetero_model", None, &["--out", path_str(&report)])
            .status
            .success()
    );
    let trace = tmp.path().join("events.jsonl");
    let o = run(
        "simulate",
        "hetero_model",
        None,
        &[
            "--strategy",
            path_str(&report),
            "--rank",
            "2",
            "--trace",
            path_str(&trace),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulated"));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 1);
    for line in text.lines() {
        let ev: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(ev.get("kind").is_some() && ev.get("time").is_some());
    }
}

#[test]
fn invalid_strategy_lists_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"degrees":{"pp":2,"dp":3,"tmp":1},"placement":[0,0,1],"mbs":5,"assignment":[0,30]}"#,
    )
    .unwrap();
    let o = run(
        "simulate",
        "homogeneous",
        None,
        &["--strategy", path_str(&path)],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.matches("invalid strategy").count() >= 3, "{err}");
}

#[test]
fn baseline_modes_run() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in ["layer-balance", "param-balance"] {
        let out = tmp.path().join(format!("{mode}.json"));
        let o = run(
            "baseline",
            "hetero_model",
            None,
            &["--mode", mode, "--out", path_str(&out)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(!Report::<f64>::load(&out).unwrap().candidates.is_empty());
    }
}

fn gen_profile(model: &Path, out: &Path, flops: &str) -> ProfileTable<f64> {
    let o = bin()
        .args([
            "gen-profile",
            "--model",
            path_str(model),
            "--tmp",
            "1,2,4",
            "--mbs",
            "1,4",
        ])
        .args([
            "--device-flops",
            flops,
            "--bandwidth",
            "2.125e10",
            "--out",
            path_str(out),
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    load_profile(out).unwrap()
}

#[test]
fn generated_profiles_reflect_layer_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let gpt = configs_dir().join("homogeneous/model.json");
    let gan = configs_dir().join("hetero_model/model.json");
    let p = gen_profile(&gpt, &tmp.path().join("gpt.json"), "1e13");
    for (tmp_deg, mbs) in [(1, 1), (2, 4), (4, 1)] {
        let t3 = p.get(3, tmp_deg, mbs).unwrap();
        assert!((4..27).all(|l| p.get(l, tmp_deg, mbs) == Some(t3)));
    }

    let g = gen_profile(&gan, &tmp.path().join("gan.json"), "1e13");
    for (tmp_deg, mbs) in [(1, 1), (2, 1), (4, 4)] {
        let slowest_narrow = (14..26)
            .map(|l| g.get(l, tmp_deg, mbs).unwrap())
            .fold(0.0, f64::max);
        let fastest_wide = (1..13)
            .map(|l| g.get(l, tmp_deg, mbs).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(fastest_wide > slowest_narrow);
    }

    let fast = gen_profile(&gan, &tmp.path().join("fast.json"), "2e13");
    for layer in 0..27 {
        for mbs in [1, 4] {
            // tmp = 1 has no all-reduce, so the time is pure compute
            assert_eq!(
                fast.get(layer, 1, mbs).unwrap() * 2.0,
                g.get(layer, 1, mbs).unwrap()
            );
        }
    }
}
