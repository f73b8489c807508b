use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use waypoint_core::trainer::RunConfig;

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "waypoint", version, about = "Goal-conditioned waypoint navigation on grid worlds")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "WAYPOINT_OUT", default_value = "runs")]
    pub out: PathBuf,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the policy, inverse model and sub-goal network.
    Train(TrainArgs),
    /// Run scenario suites against a sub-goal checkpoint.
    Eval(EvalArgs),
    /// Run an ablation study over several seeds.
    Ablate(AblateArgs),
    /// Render a heatmap, trace, shaping table or run directory to SVG.
    Plot(PlotArgs),
    /// Start the control service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EditModeArg {
    Bidirectional,
    ForwardOnly,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Interleaved,
    PostHoc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

impl ExecArg {
    fn as_str(self) -> &'static str {
        match self {
            ExecArg::Sequential => "sequential",
            ExecArg::Parallel => "parallel",
        }
    }
}

/// Run configuration, resolved as defaults < `--config` < typed flags <
/// `--set`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file of flat dotted keys (or nested sections).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set edit.k_goals=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// `simple`, `key-door`, or a layout file.
    #[arg(long)]
    pub env: Option<String>,

    /// Policy-training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,

    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Which memory-editing passes feed the sub-goal memory.
    #[arg(long, value_enum)]
    pub edit_mode: Option<EditModeArg>,

    /// When the sub-goal network trains.
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,

    /// Sequential or data-parallel execution.
    #[arg(long, value_enum)]
    pub exec: Option<ExecArg>,

    /// Disable shortest-path reward shaping.
    #[arg(long)]
    pub no_shaping: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_flat_json(&text)?
            }
            None => RunConfig::default(),
        };
        let mut typed: Vec<(&str, String)> = Vec::new();
        if let Some(v) = &self.env {
            typed.push(("env", serde_json::to_string(v)?));
        }
        if let Some(v) = self.episodes {
            typed.push(("episodes", v.to_string()));
        }
        if let Some(v) = self.seed {
            typed.push(("seed", v.to_string()));
        }
        if let Some(v) = self.edit_mode {
            let s = match v {
                EditModeArg::Bidirectional => "bidirectional",
                EditModeArg::ForwardOnly => "forward-only",
                EditModeArg::None => "none",
            };
            typed.push(("edit_mode", s.to_string()));
        }
        if let Some(v) = self.schedule {
            let s = match v {
                ScheduleArg::Interleaved => "interleaved",
                ScheduleArg::PostHoc => "post-hoc",
            };
            typed.push(("schedule", s.to_string()));
        }
        if let Some(v) = self.exec {
            typed.push(("exec", v.as_str().to_string()));
        }
        if self.no_shaping {
            typed.push(("edit.shaping", "false".to_string()));
        }
        for (k, v) in &typed {
            cfg.set(k, v)?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,

    /// Run directory name under the output root.
    #[arg(long)]
    pub name: Option<String>,

    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,

    /// Log a progress line every this many episodes (0 disables).
    #[arg(long, default_value_t = 500)]
    pub progress: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A sub-goal checkpoint file or a training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Scenario suite files. Repeatable.
    #[arg(long = "scenarios", required = true, num_args = 1..)]
    pub scenarios: Vec<PathBuf>,

    /// Base seed for per-scenario action sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Sample actions instead of taking the greedy one.
    #[arg(long)]
    pub stochastic: bool,

    /// Run scenarios sequentially or in parallel.
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,

    /// Output directory name under the output root.
    #[arg(long)]
    pub name: Option<String>,

    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    ForwardOnly,
    Shaping,
    NoEditing,
    Contamination,
    All,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Which ablation to run.
    #[arg(long, value_enum)]
    pub variant: Variant,

    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,

    #[command(flatten)]
    pub config: ConfigArgs,

    /// Scenario suite for the shaping comparison; defaults to the generated
    /// 20-scenario suite.
    #[arg(long)]
    pub suite: Option<PathBuf>,

    /// Goals per controllability probe.
    #[arg(long, default_value_t = 200)]
    pub probe_trials: usize,

    /// Episodes M for the contamination comparison; defaults to the run length.
    #[arg(long)]
    pub contamination_episodes: Option<usize>,

    /// Episodes in the success-rate window.
    #[arg(long, default_value_t = 500)]
    pub window: usize,

    /// Output directory name under the output root.
    #[arg(long)]
    pub name: Option<String>,

    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Heatmap CSV, trace JSON, shaping CSV, or a training run directory.
    pub input: PathBuf,

    /// Output file; defaults to the input with an `.svg` extension (or files
    /// inside a run directory).
    #[arg(short, long)]
    pub output: Option<PathBuf>,

    /// Draw walls and targets of this layout under heatmaps and traces.
    #[arg(long)]
    pub layout: Option<String>,

    /// Episodes per point of the success curve.
    #[arg(long, default_value_t = 100)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,

    /// Directory that `create` checkpoint names resolve under.
    #[arg(long, default_value = ".")]
    pub checkpoint_root: PathBuf,

    /// Concurrent sessions allowed.
    #[arg(long, default_value_t = 256)]
    pub max_sessions: usize,
}

/// `root/name`, refusing to clobber a non-empty directory unless `force`.
pub fn run_dir(root: &Path, name: &str, force: bool) -> Result<PathBuf, Failure> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Failure::usage(format!("invalid run name {name:?}")));
    }
    let dir = root.join(name);
    if dir.exists() {
        let occupied = std::fs::read_dir(&dir)?.next().is_some();
        if occupied && !force {
            return Err(Failure::usage(format!(
                "{} already exists; pass --force or choose another --name",
                dir.display()
            )));
        }
        if occupied {
            std::fs::remove_dir_all(&dir)?;
        }
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
