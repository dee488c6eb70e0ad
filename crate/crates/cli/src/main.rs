//! `placerec` command line: dataset generation, training, evaluation and
//! ablation runs driven by one JSON config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use placerec::{Parallelism, Pooling, Stage};

use crate::commands::{CliResult, StageSel};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "placerec", version, about = "Cross-modal place recognition experiments")]
struct Cli {
    /// JSON run config; flags override its values, which override defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset file (JSONL).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Run every kernel on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Pretrain the image-text and image-point instance models.
    Pretrain(TrainFlags),
    /// Train instance models, the scene model, or both.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Score a scene checkpoint on one split.
    Eval {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        eval: EvalFlags,
        /// Add the distance-threshold and hint-count sweeps.
        #[arg(long)]
        sweep: bool,
        /// Report path (default: <run-dir>/report_<split>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Descriptor width of the audited model.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scene descriptors of one split as CSV.
    EmbedDump {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        hints: Option<usize>,
        /// CSV path (default: <run-dir>/embeddings_<split>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the loss weight α and emit one merged table.
    Ablate {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_instance: Option<usize>,
    #[arg(long)]
    epochs_scene: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Train the scene model from fresh branch weights.
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long, value_enum)]
    pool: Option<PoolArg>,
    /// Drop all UV encoders and the position phrase of every hint.
    #[arg(long)]
    no_uv: bool,
}

#[derive(Args, Debug, Clone)]
struct Target {
    /// Scene checkpoint (default: <run-dir>/scene.uloc).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug, Clone)]
struct EvalFlags {
    /// Distance threshold in meters.
    #[arg(long)]
    d: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Text hints per scene.
    #[arg(long)]
    hints: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StageArg {
    Instance,
    Scene,
    Both,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PoolArg {
    Sap,
    Max,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(e) = self.epochs_instance {
            t.epochs_instance = e;
        }
        if let Some(e) = self.epochs_scene {
            t.epochs_scene = e;
        }
        if let Some(a) = self.alpha {
            t.alpha = a;
        }
        if self.no_pretrain {
            t.no_pretrain = true;
        }
        match self.pool {
            Some(PoolArg::Sap) => t.model.pooling = Pooling::Sap,
            Some(PoolArg::Max) => t.model.pooling = Pooling::Max,
            None => {}
        }
        if self.no_uv {
            t.model.use_uv = false;
        }
    }
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = self.d {
            cfg.eval.d = d;
        }
        if let Some(ks) = &self.ks {
            cfg.eval.ks = ks.clone();
        }
        if let Some(h) = self.hints {
            cfg.eval.hints = h;
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(d) = cli.dataset {
        cfg.paths.dataset = d;
    }
    if let Some(r) = cli.run_dir {
        cfg.paths.run_dir = r;
    }
    let par = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::default()
    };
    match &cli.command {
        Command::Generate { seed, scenes } => {
            if let Some(s) = seed {
                cfg.world.seed = *s;
            }
            if let Some(n) = scenes {
                cfg.world.num_scenes = *n;
            }
        }
        Command::Pretrain(f) | Command::Train { flags: f, .. } | Command::Ablate { flags: f, .. } => f.apply(&mut cfg),
        Command::Eval { eval, .. } => eval.apply(&mut cfg),
        Command::EmbedDump { hints, .. } => {
            if let Some(h) = hints {
                cfg.eval.hints = *h;
            }
        }
        Command::Gradcheck { .. } => {}
    }
    if let Command::Ablate { alphas: Some(a), .. } = &cli.command {
        cfg.eval.alphas = a.clone();
    }
    cfg.validate()?;
    let run_dir = cfg.paths.run_dir.clone();
    let checkpoint = |t: &Target| {
        t.checkpoint
            .clone()
            .unwrap_or_else(|| commands::checkpoint_path(&run_dir, Stage::Scene))
    };

    match cli.command {
        Command::Generate { .. } => {
            let counts = commands::generate(&cfg, par)?;
            print_json(&serde_json::json!({
                "dataset": cfg.paths.dataset,
                "splits": counts,
            }));
        }
        Command::Pretrain(_) => {
            for p in commands::train(&cfg, StageSel::Instance, par)? {
                println!("{}", p.display());
            }
        }
        Command::Train { stage, .. } => {
            let sel = match stage {
                StageArg::Instance => StageSel::Instance,
                StageArg::Scene => StageSel::Scene,
                StageArg::Both => StageSel::Both,
            };
            for p in commands::train(&cfg, sel, par)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            ref target,
            sweep,
            ref out,
            ..
        } => {
            let split = commands::parse_split(&target.split)?;
            let report = commands::eval(&cfg, &checkpoint(target), split, sweep, par)?;
            let path = out
                .clone()
                .unwrap_or_else(|| run_dir.join(format!("report_{}.json", target.split)));
            commands::save_report(&path, &report)?;
            for r in report.task_matrix.iter().chain(&report.exact_location) {
                let ks: Vec<String> = r.recalls.iter().map(|(k, v)| format!("R@{k} {v:.3}")).collect();
                println!("{:<4} {:<18} {}", r.task, r.criterion, ks.join("  "));
            }
            println!("mean cross-modal R@1 {:.4}", report.mean_cross_modal_r1);
            println!("{}", path.display());
        }
        Command::Gradcheck { dim, ref out } => {
            let summary = commands::gradcheck(&cfg, dim)?;
            for g in &summary.graphs {
                println!("{:<24} {:.2e}", g.graph, g.max_error);
            }
            let path = out.clone().unwrap_or_else(|| run_dir.join("gradcheck.json"));
            commands::save_report(&path, &summary)?;
            if !summary.pass {
                return Err(CliError::GradCheck(format!(
                    "an error reached {:e}",
                    commands::GRAD_TOLERANCE
                )));
            }
        }
        Command::EmbedDump {
            ref target, ref out, ..
        } => {
            let split = commands::parse_split(&target.split)?;
            let path = out
                .clone()
                .unwrap_or_else(|| run_dir.join(format!("embeddings_{}.csv", target.split)));
            let rows = commands::embed_dump(&cfg, &checkpoint(target), split, &path, par)?;
            println!("{rows} rows -> {}", path.display());
        }
        Command::Ablate { ref out, .. } => {
            let table = commands::ablate(&cfg, par)?;
            let path = out.clone().unwrap_or_else(|| run_dir.join("ablate_alpha.json"));
            commands::save_report(&path, &table)?;
            for row in &table.rows {
                println!(
                    "alpha {:.2}  mean cross-modal R@1 {:.4}",
                    row.alpha, row.mean_cross_modal_r1
                );
            }
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
