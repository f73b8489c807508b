use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::json;
use waypoint_core::parallel::Exec;
use waypoint_core::scenario::{export_artifacts, load_suite, run_suite, Scenario, ScenarioResult};
use waypoint_core::subgoal::SubgoalAgent;

use crate::args::{run_dir, EvalArgs, ExecArg};
use crate::failure::Failure;
use crate::output::{write_json, write_manifest};

/// A checkpoint file as given, or `checkpoints/subgoal.json` inside a run
/// directory.
pub fn checkpoint_file(path: &Path) -> Result<PathBuf, Failure> {
    let file = if path.is_dir() {
        path.join("checkpoints").join("subgoal.json")
    } else {
        path.to_path_buf()
    };
    if !file.is_file() {
        return Err(Failure::usage(format!("no checkpoint at {}", file.display())));
    }
    Ok(file)
}

pub fn exec_of(e: ExecArg) -> Exec {
    match e {
        ExecArg::Sequential => Exec::Sequential,
        ExecArg::Parallel => Exec::Parallel,
    }
}

pub fn run(out: &Path, a: EvalArgs) -> Result<(), Failure> {
    let checkpoint = checkpoint_file(&a.checkpoint)?;
    let mut suite: Vec<Scenario> = Vec::new();
    for p in &a.scenarios {
        if !p.is_file() {
            return Err(Failure::usage(format!("no scenario file at {}", p.display())));
        }
        suite.extend(load_suite(p)?);
    }
    let mut names = BTreeSet::new();
    for sc in &suite {
        if !names.insert(sc.name.as_str()) {
            return Err(Failure::usage(format!("scenario name {:?} appears twice", sc.name)));
        }
    }
    let name = a.name.clone().unwrap_or_else(|| {
        let stem = a.scenarios[0].file_stem().and_then(|s| s.to_str()).unwrap_or("suite");
        format!("eval-{stem}-s{}", a.seed)
    });

    // One checkpoint load per distinct layout.
    let mut groups: BTreeMap<&str, Vec<Scenario>> = BTreeMap::new();
    for sc in &suite {
        groups.entry(sc.layout.as_str()).or_default().push(sc.clone());
    }
    let mut results: Vec<ScenarioResult> = Vec::new();
    for (layout, group) in &groups {
        let env = group[0].environment()?;
        for sc in group {
            sc.validate(&env)?;
        }
        let agent = SubgoalAgent::load(&checkpoint, &env)?;
        log::info!("{} scenarios on layout {layout}", group.len());
        results.extend(run_suite(&agent, &env, group, a.seed, !a.stochastic, exec_of(a.exec))?);
    }
    results.sort_by(|x, y| x.name.cmp(&y.name));

    let dir = run_dir(out, &name, a.force)?;
    write_manifest(
        &dir,
        "eval",
        json!({
            "name": name,
            "checkpoint": checkpoint,
            "scenarios": a.scenarios,
            "seed": a.seed,
            "greedy": !a.stochastic,
        }),
    )?;
    export_artifacts(&results, &dir)?;
    for r in &results {
        println!(
            "{:<24} {} steps {:>5} waypoints {}/{} stages {}",
            r.name,
            if r.success { "ok  " } else { "FAIL" },
            r.total_steps,
            r.waypoints_reached(),
            r.reached.iter().filter(|o| o.kind == waypoint_core::scenario::GoalKind::Waypoint).count(),
            r.stages_cleared
        );
    }
    let ok = results.iter().filter(|r| r.success).count();
    let mean_steps = results.iter().map(|r| r.total_steps as f64).sum::<f64>() / results.len().max(1) as f64;
    write_json(
        &dir.join("summary.json"),
        &json!({ "scenarios": results.len(), "succeeded": ok, "mean_steps": mean_steps }),
    )?;
    println!("{ok}/{} scenarios succeeded, mean {mean_steps:.1} steps -> {}", results.len(), dir.display());
    Ok(())
}
