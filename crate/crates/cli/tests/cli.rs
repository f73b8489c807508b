use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--episodes",
    "3",
    "--set",
    "horizon=60",
    "--set",
    "posthoc_steps=5",
    "--set",
    "tail_episodes=2",
    "--exec",
    "sequential",
];

fn waypoint(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waypoint"))
        .args(args)
        .env("WAYPOINT_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn train(out: &Path, name: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--name", name];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    waypoint(out, &args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&waypoint(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&waypoint(tmp.path(), &["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(code(&waypoint(out, &["train", "--bogus"])), 1);
    assert_eq!(code(&waypoint(out, &["frobnicate"])), 1);
    assert_eq!(code(&train(out, "a", &["--set", "no.such.key=1"])), 1);
    assert_eq!(code(&train(out, "b", &["--set", "episodes"])), 1);
    assert_eq!(code(&train(out, "c", &["--set", "gamma=2.5"])), 1);
    assert_eq!(code(&train(out, "d", &["--env", "missing-layout.json"])), 1);
    let o = waypoint(out, &["eval", "--checkpoint", "nowhere", "--scenarios", "none.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checkpoint"));
    assert_eq!(code(&waypoint(out, &["plot", "missing.csv"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("subgoal.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let suite = tmp.path().join("suite.json");
    std::fs::write(&suite, r#"[{"name":"x","start":[15,15],"subgoals":[],"final_target":[3,3]}]"#).unwrap();
    let o = waypoint(
        tmp.path(),
        &["eval", "--checkpoint", bad.to_str().unwrap(), "--scenarios", suite.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let o = train(out, "first", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("first");
    for f in ["manifest.json", "metrics.jsonl", "summary.json", "visits.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    for f in ["policy.json", "subgoal.json", "inverse.json"] {
        assert!(dir.join("checkpoints").join(f).is_file(), "{f} missing");
    }
    let manifest = json(&dir.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"]["config"]["episodes"], 3);
    assert_eq!(manifest["inputs"]["config"]["horizon"], 60);
    assert!(manifest["created_unix"].as_u64().unwrap() > 0);
    let lines = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for (i, l) in lines.lines().enumerate() {
        let m: Value = serde_json::from_str(l).unwrap();
        assert_eq!(m["episode"], i);
        assert!(m["steps"].as_u64().unwrap() <= 60);
    }
    let visits = std::fs::read_to_string(dir.join("visits.csv")).unwrap();
    let (w, h, grids) = waypoint_core::scenario::parse_visits_csv(&visits).unwrap();
    assert_eq!((w, h, grids.len()), (20, 20, 1));
    let total: f64 = grids[0].iter().sum();
    let steps: u64 = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["steps"].as_u64().unwrap())
        .sum();
    assert!(total >= steps as f64);

    // Same config, same outputs apart from the timestamp.
    assert_eq!(code(&train(out, "second", &[])), 0);
    assert_eq!(json(&dir.join("summary.json")), json(&out.join("second/summary.json")));
    assert_eq!(
        std::fs::read(dir.join("checkpoints/subgoal.json")).unwrap(),
        std::fs::read(out.join("second/checkpoints/subgoal.json")).unwrap()
    );

    // Existing directories are protected unless forced.
    assert_eq!(code(&train(out, "first", &[])), 1);
    assert_eq!(code(&train(out, "first", &["--force"])), 0);
}

#[test]
fn config_file_sits_under_flags_and_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "edit.k_goals": 2, "gamma": 0.95}"#).unwrap();
    let o = train(tmp.path(), "cfg", &["--config", cfg.to_str().unwrap(), "--seed", "4", "--set", "gamma=0.9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = &json(&tmp.path().join("cfg/manifest.json"))["inputs"]["config"];
    assert_eq!(c["seed"], 4);
    assert_eq!(c["edit.k_goals"], 2);
    assert_eq!(c["gamma"], 0.9);
}

#[test]
fn eval_and_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(code(&train(out, "run", &[])), 0);
    let suite = out.join("suite.json");
    std::fs::write(
        &suite,
        r#"[{"name":"near","start":[15,15],"subgoals":[[15,13]],"final_target":[14,13],"total_horizon":40},
            {"name":"far","start":[15,15],"subgoals":[[10,10]],"final_target":[3,3],"per_subgoal_budget":20,"total_horizon":60}]"#,
    )
    .unwrap();
    let run = out.join("run");
    let o = waypoint(
        out,
        &["eval", "--checkpoint", run.to_str().unwrap(), "--scenarios", suite.to_str().unwrap(), "--name", "ev"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("near") && stdout.contains("far"));
    let ev = out.join("ev");
    let summary = std::fs::read_to_string(ev.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("far,"));
    let find = |prefix: &str, suffix: &str| {
        std::fs::read_dir(&ev)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| {
                let n = p.file_name().unwrap().to_str().unwrap();
                n.starts_with(prefix) && n.ends_with(suffix)
            })
            .unwrap_or_else(|| panic!("no {prefix}*{suffix}"))
    };
    let trace = find("near.s", ".trace.json");
    assert_eq!(std::fs::read_to_string(ev.join("results.jsonl")).unwrap().lines().count(), 2);

    let o = waypoint(out, &["plot", trace.to_str().unwrap(), "--layout", "simple"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(trace.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));

    let heat = find("far.s", ".heatmap.csv");
    let target = out.join("far.svg");
    let o = waypoint(out, &["plot", heat.to_str().unwrap(), "-o", target.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(&target).unwrap().contains("<rect"));

    let o = waypoint(out, &["plot", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("heatmap.svg").is_file());
    assert!(run.join("success.svg").is_file());

    // Duplicate names across files are refused.
    let o = waypoint(
        out,
        &[
            "eval",
            "--checkpoint",
            run.to_str().unwrap(),
            "--scenarios",
            suite.to_str().unwrap(),
            suite.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let mut args = vec![
        "ablate",
        "--variant",
        "no-editing",
        "--seeds",
        "0,1",
        "--probe-trials",
        "10",
        "--window",
        "2",
    ];
    args.extend_from_slice(TINY);
    let o = waypoint(out, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("ablate-no-editing/ablation.json"));
    let rows = report["no_editing"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["untrained_reach_rate"].as_f64().unwrap())));

    let mut args = vec![
        "ablate",
        "--variant",
        "contamination",
        "--seeds",
        "0",
        "--contamination-episodes",
        "4",
    ];
    args.extend_from_slice(TINY);
    assert_eq!(code(&waypoint(out, &args)), 1);
}
