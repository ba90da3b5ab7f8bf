use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vit_tad::{cmd_ablate, cmd_bench, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train, error_rates, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "vit-tad", version, about = "Snippet-based ViT temporal action detection on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the training split and write checkpoint.vtad, loss.csv and config.json.
    Train(Common),
    /// Detect on a split and write detections.jsonl, metrics.csv and errors.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `train` or `val`; overrides `eval.split`.
        #[arg(long)]
        split: Option<String>,
        /// Checkpoint to load; defaults to `{out}/checkpoint.vtad`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every arm of `ablate.arms` and write ablation.csv.
    Ablate(Common),
    /// Write analytic and instrumented cost tables.
    Bench(Common),
    /// Run finite-difference gradient checks and write gradcheck.csv.
    Gradcheck(Common),
    /// Write the configured synthetic dataset to a directory.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Destination directory.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let every = (cfg.train.steps / 20).max(1);
            let out = cmd_train(&cfg, |r| {
                if r.step % every == 0 || r.step + 1 == cfg.train.steps {
                    eprintln!("step {:>5}  loss {:.4}  cls {:.4}  reg {:.4}", r.step, r.loss, r.cls, r.reg);
                }
            })?;
            eprintln!("wrote {}", out.checkpoint.display());
        }
        Command::Eval {
            common,
            split,
            checkpoint,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint;
            }
            let report = cmd_eval(&cfg)?;
            for (t, m) in report.thresholds.iter().zip(&report.map) {
                eprintln!("mAP@{t:.2} {m:.4}");
            }
            eprintln!("average mAP {:.4}", report.average);
            for (name, rate) in error_rates(&report) {
                eprintln!("{name} {rate:.4}");
            }
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            cmd_ablate(&cfg, |r| {
                eprintln!(
                    "{}: params {} final loss {:.4} train mAP {:.4}",
                    r.arm.name, r.params, r.final_loss, r.train_avg_map
                )
            })?;
            eprintln!("wrote {}", cfg.out.join("ablation.csv").display());
        }
        Command::Bench(common) => {
            let cfg = load(&common)?;
            let b = cmd_bench(&cfg)?;
            eprintln!(
                "mult-adds analytic {} instrumented {}; 3D/1D attention ratio {}",
                b.analytic_mult_adds, b.instrumented_mult_adds, b.elems_ratio
            );
        }
        Command::Gradcheck(common) => {
            let cfg = load(&common)?;
            for r in cmd_gradcheck(&cfg)? {
                eprintln!("{}: {} entries, max rel error {:.3e}", r.component, r.entries, r.max_rel_error);
            }
        }
        Command::Generate { common, dir } => {
            let cfg = load(&common)?;
            cmd_generate(&cfg, &dir)?;
            eprintln!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
