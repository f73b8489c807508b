use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::json;
use waypoint_core::scenario::visits_csv;
use waypoint_core::study::success_rate;
use waypoint_core::trainer::{EpisodeMetrics, RunConfig, Trainer};

use crate::args::{run_dir, TrainArgs};
use crate::failure::Failure;
use crate::output::{write_json, write_manifest};

/// `simple-s3`, `key-door-s0`, or the layout file stem.
pub fn default_name(cfg: &RunConfig, prefix: &str) -> String {
    let env = Path::new(&cfg.env)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    format!("{prefix}{env}-s{}", cfg.seed)
}

fn mean(metrics: &[EpisodeMetrics], f: impl Fn(&EpisodeMetrics) -> f64) -> f64 {
    if metrics.is_empty() {
        0.0
    } else {
        metrics.iter().map(f).sum::<f64>() / metrics.len() as f64
    }
}

pub fn run(out: &Path, a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.config.resolve()?;
    let name = a.name.clone().unwrap_or_else(|| default_name(&cfg, ""));
    let dir = run_dir(out, &name, a.force)?;
    write_manifest(&dir, "train", json!({ "name": name, "config": cfg.to_flat() }))?;

    let mut trainer = Trainer::new(cfg.clone())?;
    let file = std::fs::File::create(dir.join("metrics.jsonl"))?;
    let mut sink = BufWriter::new(file);
    let started = Instant::now();
    let mut io_error = None;
    let mut recent = 0usize;
    let metrics = trainer.run(|m| {
        if io_error.is_none() {
            let line = serde_json::to_string(m).expect("metrics serialize");
            if let Err(e) = writeln!(sink, "{line}") {
                io_error = Some(e);
            }
        }
        recent += m.success as usize;
        if a.progress > 0 && (m.episode + 1) % a.progress == 0 {
            log::info!(
                "episode {:>6}: success {:.3} over the last {}, {:.0}s",
                m.episode + 1,
                recent as f64 / a.progress as f64,
                a.progress,
                started.elapsed().as_secs_f64()
            );
            recent = 0;
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    sink.flush()?;

    trainer.save(&dir.join("checkpoints"))?;
    let layout = trainer.env.layout(1);
    std::fs::write(
        dir.join("visits.csv"),
        visits_csv(layout.width(), layout.height(), &trainer.visits),
    )?;

    let window = 500.min(metrics.len());
    let tail = &metrics[metrics.len() - window..];
    let summary = json!({
        "episodes": metrics.len(),
        "window": window,
        "success_rate": success_rate(&metrics, metrics.len(), window),
        "mean_steps": mean(tail, |m| m.steps as f64),
        "mean_stages_cleared": mean(tail, |m| m.stages_cleared as f64),
        "max_stages_cleared": metrics.iter().map(|m| m.stages_cleared).max().unwrap_or(0),
        "goal_memory": trainer.goal_memory.len(),
        "subgoal_checksum": format!("{:016x}", trainer.subgoal.checksum()),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{}: {} episodes, success {:.3} over the last {window}, mean {:.1} steps -> {}",
        name,
        metrics.len(),
        summary["success_rate"].as_f64().unwrap_or(0.0),
        summary["mean_steps"].as_f64().unwrap_or(0.0),
        dir.display()
    );
    Ok(())
}
