use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mopeft::data::fmt_sig6;
use mopeft_cli::{GradcheckOptions, SweepAxis};

#[derive(Parser)]
#[command(name = "mopeft", version, about = "Gated mixtures of PEFT methods on a tiny ViT segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file with `[section]` headers; defaults if omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set peft.rank=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode and write config, checkpoint, metrics and gate reports.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `out_dir`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Overwrite a previous run in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-evaluate a finished run on its validation split.
    Eval {
        /// Run directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Data overrides, e.g. `--set data.domain=rings`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every trainable gradient on one batch.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Noise std added to trainable parameters first (0 = at init).
        #[arg(long, default_value_t = GradcheckOptions::default().perturb)]
        perturb: f64,
        /// Coordinates checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 32)]
        coords: usize,
    },
    /// Train once per value of one PEFT size and write summary.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// peft.rank, peft.prefix_len or peft.d_mid
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `5,10,20,25`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print gate selection counts and the parameter budget of a run.
    Report {
        /// Run directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { cfg, out, force } => {
            let cfg = mopeft_cli::load_config(cfg.config.as_deref(), &cfg.overrides, out.as_deref())?;
            let run = mopeft_cli::train(&cfg, force)?;
            if let Some(m) = run.final_train_miou() {
                println!("final train mIoU {}", fmt_sig6(m));
            }
            println!("final val mIoU   {}", fmt_sig6(run.final_val_miou()));
            println!("{}", run.params);
            println!("artifacts in {}", run.out_dir.display());
        }
        Command::Eval { out, overrides } => {
            let r = mopeft_cli::eval(&out, &overrides)?;
            println!("loss {}", fmt_sig6(r.loss));
            println!("mIoU {}", fmt_sig6(r.miou));
            for (c, iou) in r.per_class.iter().enumerate() {
                match iou {
                    Some(v) => println!("  class {c}: IoU {}", fmt_sig6(*v)),
                    None => println!("  class {c}: absent"),
                }
            }
            if let Some(g) = r.gate_means {
                println!("mean gates: lora {} prefix {} adapter {}", fmt_sig6(g[0]), fmt_sig6(g[1]), fmt_sig6(g[2]));
            }
        }
        Command::Gradcheck { cfg, perturb, coords } => {
            let cfg = mopeft_cli::load_config(cfg.config.as_deref(), &cfg.overrides, None)?;
            let opts = GradcheckOptions {
                perturb,
                max_coords: (coords > 0).then_some(coords),
                ..GradcheckOptions::default()
            };
            let outcome = mopeft_cli::gradcheck(&cfg, opts)?;
            println!("{outcome}");
            return Ok(outcome.passed());
        }
        Command::Sweep { cfg, axis, values, out, force, parallel } => {
            let cfg = mopeft_cli::load_config(cfg.config.as_deref(), &cfg.overrides, out.as_deref())?;
            let points = mopeft_cli::sweep(&cfg, axis, &values, parallel, force)?;
            println!("{}", mopeft_cli::SUMMARY_HEADER);
            for p in &points {
                println!("{},{},{}", p.value, fmt_sig6(p.run.final_val_miou()), p.run.params.trainable);
            }
        }
        Command::Report { out } => print!("{}", mopeft_cli::report(&out)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
