//! `cmscan`: generate data, train, evaluate, predict and benchmark.
//!
//! Exit status: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 numeric failure. Log level comes from `CMSCAN_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmscan::bench::run_bench;
use cmscan::run::{evaluate, gen_data, predict_files, train, RunConfig};
use cmscan::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "cmscan",
    version,
    about = "Cross-modal selective-scan RGB-thermal segmentation"
)]
struct Cli {
    /// Worker threads for the parallel scan kernel; 1 keeps runs bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scenes to OUT/{train,val,test} plus spec.json.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Total scenes across all splits; defaults to the config's data.count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model, writing checkpoints and metrics.jsonl under the output dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the config output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report per-class IoU and mIoU of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; when omitted the checkpoint's own data config is regenerated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path; defaults to the checkpoint path with `.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one RGB/thermal pair into a palette PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Accept sides not divisible by 32 by resizing internally.
        #[arg(long)]
        auto_resize: bool,
    },
    /// Count FLOPs and parameters and measure runtime scaling.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for bench.json; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the parallel scan kernel.
        #[arg(long)]
        parallel: bool,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            let base = absolute(path)?;
            cfg.resolve_paths(base.parent().unwrap_or(Path::new("/")));
            cfg
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.resolve_paths(&absolute(Path::new("."))?);
            cfg
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData { cfg, out, count } => {
            let cfg = load_config(&cfg)?;
            let count = count.unwrap_or(cfg.data.count);
            gen_data(&cfg, &absolute(&out)?, count)?;
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Train { cfg, out, resume } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(out) = out {
                cfg.output_dir = absolute(&out)?;
            }
            let outcome = train(&cfg, resume.as_deref())?;
            if let Some(last) = outcome.checkpoints.last() {
                println!("checkpoint {}", last.display());
            }
            println!("train mIoU {:.4}", outcome.final_train_miou);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = evaluate(&checkpoint, data.as_deref(), &split)?;
            for (k, iou) in report.per_class_iou.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {k:>3}  IoU {v:.4}"),
                    None => println!("class {k:>3}  IoU   n/a"),
                }
            }
            println!(
                "mIoU {:.4} over {} samples ({split})",
                report.miou, report.samples
            );
            let out = out.unwrap_or_else(|| checkpoint.with_extension("eval.json"));
            write_json(&out, &report)?;
        }
        Command::Predict {
            checkpoint,
            rgb,
            thermal,
            out,
            auto_resize,
        } => {
            predict_files(&checkpoint, &rgb, &thermal, &out, auto_resize)?;
            println!("wrote {}", out.display());
        }
        Command::Bench { cfg, out, parallel } => {
            let run_cfg = load_config(&cfg)?;
            let mut bench = run_cfg.bench.clone();
            bench.workload.parallel |= parallel;
            let report = run_bench(&run_cfg.model, &bench, run_cfg.seed)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                write_json(&dir.join("bench.json"), &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMSCAN_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
