use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;
use waypoint_core::editing::EditMode;
use waypoint_core::eval::{reach_probe, ProbeConfig};
use waypoint_core::grid::EnvKind;
use waypoint_core::scenario::{generate_suite, load_suite, SUITE_SEED};
use waypoint_core::study::{contamination, direction_ablation, shaping_ablation, PolicyRun};
use waypoint_core::trainer::RunConfig;

use crate::args::{run_dir, AblateArgs, Variant};
use crate::failure::Failure;
use crate::output::{write_json, write_manifest};

#[derive(Debug, Serialize)]
struct NoEditingRow {
    seed: u64,
    success_rate: f64,
    /// Reach rate of the sub-goal network, which never trains without edits.
    untrained_reach_rate: f64,
}

pub fn run(out: &Path, a: AblateArgs) -> Result<(), Failure> {
    if a.seeds.is_empty() {
        return Err(Failure::usage("--seeds needs at least one seed"));
    }
    if a.window == 0 || a.probe_trials == 0 {
        return Err(Failure::usage("--window and --probe-trials must be positive"));
    }
    let base = a.config.resolve()?;
    let wants = |v: Variant| a.variant == Variant::All || a.variant == v;
    let contamination_episodes = a.contamination_episodes.unwrap_or(base.episodes);
    if wants(Variant::Contamination) && (contamination_episodes == 0 || contamination_episodes > base.episodes) {
        return Err(Failure::usage(format!(
            "--contamination-episodes must lie in 1..={}",
            base.episodes
        )));
    }
    let env = base.environment()?;
    let suite = if wants(Variant::Shaping) {
        match &a.suite {
            Some(p) => load_suite(p)?,
            None if env.kind() == EnvKind::Simple => generate_suite(&env, 20, SUITE_SEED)?,
            None => return Err(Failure::usage("the shaping ablation on this layout needs --suite")),
        }
    } else {
        Vec::new()
    };
    let variant = a.variant.to_possible_value().expect("no skipped variants").get_name().to_string();
    let name = a.name.clone().unwrap_or_else(|| format!("ablate-{variant}"));
    let dir = run_dir(out, &name, a.force)?;
    write_manifest(
        &dir,
        "ablate",
        json!({
            "name": name,
            "variant": variant,
            "seeds": a.seeds,
            "config": base.to_flat(),
            "probe_trials": a.probe_trials,
            "window": a.window,
            "contamination_episodes": contamination_episodes,
            "suite": a.suite,
        }),
    )?;

    // Sub-goal variants are all rebuilt from the policy's recorded tail, so
    // the policy run itself skips online editing.
    let mut runs = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        let cfg = RunConfig {
            seed,
            edit_mode: EditMode::None,
            ..base.clone()
        };
        let t = Instant::now();
        let run = PolicyRun::train(cfg, |_| {})?;
        log::info!(
            "seed {seed}: success {:.3}, {:.0}s",
            run.success_rate(run.metrics.len(), a.window),
            t.elapsed().as_secs_f64()
        );
        runs.push(run);
    }

    let mut report = serde_json::Map::new();
    let probe = |seed: u64| ProbeConfig {
        trials: a.probe_trials,
        seed,
        ..ProbeConfig::default()
    };

    if wants(Variant::NoEditing) {
        let mut rows = Vec::new();
        for (run, &seed) in runs.iter().zip(&a.seeds) {
            let reach = reach_probe(&run.trainer.env, &run.trainer.subgoal, &probe(seed), &|_, _| true)?;
            rows.push(NoEditingRow {
                seed,
                success_rate: run.success_rate(run.metrics.len(), a.window),
                untrained_reach_rate: reach.rate,
            });
        }
        for r in &rows {
            println!(
                "no-editing seed {}: final-goal success {:.3}, sub-goal reach {:.3}",
                r.seed, r.success_rate, r.untrained_reach_rate
            );
        }
        report.insert("no_editing".into(), serde_json::to_value(&rows)?);
    }

    if wants(Variant::ForwardOnly) {
        let mut csv = String::from("seed,heading_dx,heading_dy,bidirectional_all,bidirectional_opposite,forward_all,forward_opposite,gap_pp\n");
        let mut rows = Vec::new();
        for (run, &seed) in runs.iter().zip(&a.seeds) {
            let r = direction_ablation(run, &probe(seed), seed)?;
            println!(
                "forward-only seed {seed}: opposite-direction reach {:.3} bidirectional vs {:.3} forward-only ({:+.1} pp)",
                r.bidirectional_opposite, r.forward_opposite, r.gap_pp
            );
            let _ = writeln!(
                csv,
                "{seed},{},{},{},{},{},{},{}",
                r.heading.dx,
                r.heading.dy,
                r.bidirectional_all,
                r.bidirectional_opposite,
                r.forward_all,
                r.forward_opposite,
                r.gap_pp
            );
            rows.push(json!({ "seed": seed, "report": r }));
        }
        std::fs::write(dir.join("forward_only.csv"), csv)?;
        report.insert("forward_only".into(), json!(rows));
    }

    if wants(Variant::Shaping) {
        let cmp = shaping_ablation(&runs, &suite, a.seeds[0])?;
        println!(
            "shaping: mean steps {:.1} shaped vs {:.1} unshaped ({:.1}% reduction), success {:.3} vs {:.3}",
            cmp.shaped_mean_steps,
            cmp.unshaped_mean_steps,
            100.0 * cmp.relative_reduction,
            cmp.shaped_success,
            cmp.unshaped_success
        );
        std::fs::write(dir.join("shaping.csv"), cmp.to_csv())?;
        report.insert("shaping".into(), serde_json::to_value(&cmp)?);
    }

    if wants(Variant::Contamination) {
        let mut rows = Vec::new();
        for (run, &seed) in runs.iter().zip(&a.seeds) {
            let r = contamination(run, contamination_episodes, a.window)?;
            println!(
                "contamination seed {seed}: success {:.3} clean vs {:.3} contaminated ({:+.1} pp)",
                r.clean_success, r.contaminated_success, r.gap_pp
            );
            rows.push(json!({ "seed": seed, "report": r }));
        }
        report.insert("contamination".into(), json!(rows));
    }

    write_json(&dir.join("ablation.json"), &report)?;
    println!("-> {}", dir.display());
    Ok(())
}
