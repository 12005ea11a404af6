use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmsa_vqa::harness::{self, RunConfig};
use cmsa_vqa::Error;

#[derive(Parser)]
#[command(name = "cmsa-vqa", about = "Cross-modal self-attention VQA with multi-task encoder pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the data directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus.
    GenData(Common),
    /// Pre-train the three encoders.
    Pretrain(Common),
    /// Train the VQA model end to end.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or directory of pre-training checkpoints.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a VQA checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: OUT/vqa.cmtb).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturbs the analytic gradient of this parameter (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load(common: &Common, out_is_data: bool) -> cmsa_vqa::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        if out_is_data {
            cfg.data_dir = out.clone();
        } else {
            cfg.out_dir = out.clone();
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> cmsa_vqa::Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c, true)?;
            harness::run_gen_data(&cfg)?;
            println!("wrote {}", cfg.data_dir.display());
        }
        Command::Pretrain(c) => {
            let cfg = load(&c, false)?;
            for s in harness::run_pretrain(&cfg)? {
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Train { common, init } => {
            let cfg = load(&common, false)?;
            let summary = harness::run_vqa_train(&cfg, init.as_deref())?;
            let t = summary.test;
            println!("Open {:.1}%  Closed {:.1}%  All {:.1}%", 100.0 * t.open_acc, 100.0 * t.closed_acc, 100.0 * t.all_acc);
        }
        Command::Eval { common, init, split } => {
            let cfg = load(&common, false)?;
            let ckpt = init.unwrap_or_else(|| cfg.out_dir.join("vqa.cmtb"));
            let m = harness::run_eval(&ckpt, &cfg.data_dir, &split, cfg.eval_threads)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Gradcheck { common, corrupt } => {
            let cfg = load(&common, false)?;
            let start = std::time::Instant::now();
            let report = harness::run_gradcheck(&cfg, corrupt)?;
            for p in &report.params {
                let status = if p.worst_rel_err <= report.tol { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:32} checked {:6} excluded {:4} worst {:.3e}",
                    p.name, p.checked, p.excluded, p.worst_rel_err
                );
            }
            println!(
                "{} parameters, {} coordinates, {:.1}s",
                report.params.len(),
                report.coordinates_checked(),
                start.elapsed().as_secs_f64()
            );
            if !report.passed() {
                let worst = report.worst().expect("failed report has a parameter");
                eprintln!("gradient check failed: {} (relative error {:.3e})", worst.name, worst.worst_rel_err);
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
