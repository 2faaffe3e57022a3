use std::path::PathBuf;
use std::process::ExitCode;

use amfd_cli::commands::{self, TrainOptions};
use amfd_cli::config::Split;
use amfd_cli::{CliError, CliResult, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

/// Fusion distillation experiments on the synthetic pedestrian benchmark.
#[derive(Debug, Parser)]
#[command(name = "amfd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.plan=traditional`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <output>/data.
    GenData(Common),
    /// Train one student into <output>/train.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps are complete.
        #[arg(long, value_name = "N")]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <output>/train/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train the none, traditional and amfd arms and tabulate them.
    Ablate(Common),
    /// Write spatial attention grids for one scene.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides export.split.
        #[arg(long)]
        split: Option<Split>,
        /// Overrides export.scene.
        #[arg(long)]
        scene: Option<usize>,
    },
}

fn checkpoint_or_default(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| commands::train_dir(cfg).join(commands::CHECKPOINT))
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let dir = commands::gen_data(&cfg)?;
            println!(
                "wrote {} train and {} test scenes to {}",
                cfg.dataset.train_scenes,
                cfg.dataset.test_scenes,
                dir.display()
            );
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.load()?;
            let m = commands::train(&cfg, TrainOptions { resume, stop_after })?;
            print!("{} steps of {}", m.steps_completed, cfg.train.iterations);
            if let Some(last) = m.log.last() {
                print!(", final total loss {:.6}", last.total);
            }
            println!();
            if let Some(r) = &m.report {
                println!("test mAP {:.4}, MR-2 {:.4}", r.all.map_coco, r.all.mr2);
            }
            println!("manifest {}", commands::train_dir(&cfg).join(commands::MANIFEST).display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.load()?;
            let ckpt = checkpoint_or_default(&cfg, checkpoint);
            let (path, r) = commands::eval(&cfg, &ckpt, split)?;
            println!(
                "{} split: mAP {:.4}, AP50 {:.4}, MR-2 {:.4}",
                split.name(),
                r.all.map_coco,
                r.all.ap50,
                r.all.mr2
            );
            println!("report {}", path.display());
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = commands::ablate(&cfg)?;
            print!("{}", commands::ablation_text(&rows));
        }
        Command::ExportAttention {
            common,
            checkpoint,
            split,
            scene,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = split {
                cfg.export.split = s;
            }
            if let Some(s) = scene {
                cfg.export.scene = s;
            }
            let ckpt = checkpoint_or_default(&cfg, checkpoint);
            let files = commands::export_attention(&cfg, &ckpt)?;
            for f in &files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                CliError::Usage(String::new()).exit_code()
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
