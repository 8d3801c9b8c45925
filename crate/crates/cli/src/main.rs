//! Command-line driver. Exit codes: 0 success, 1 failed check or runtime
//! error, 2 usage / configuration error, 3 training divergence.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sga_core::config::RunConfig;
use sga_core::error::{Result, SgaError};
use sga_core::harness;
use sga_core::theory::run_verification;

#[derive(Parser)]
#[command(name = "sga", version, about = "Spatial Gram alignment laboratory")]
struct Cli {
    /// flat `key = value` config file (`#` comments allowed)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// override one config key; repeatable, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// override the run seed, applied last
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the numerical certification suite and write report.{txt,csv}
    Verify {
        /// output directory for the reports
        #[arg(long, default_value = "verification")]
        out: PathBuf,
    },
    /// Stage-1 pre-training pass that produces the frozen reference encoder
    PretrainVae,
    /// Full stage-1 fine-tuning pass (runs the pre-training pass if needed)
    TrainVae,
    /// Stage-2 pass with alignment disabled (the shared baseline)
    PretrainDiffusion,
    /// Stage-2 pass under the configured alignment mode
    TrainDiffusion,
    /// Decode guided samples to P6 pixmaps under <run>/samples/
    Sample {
        /// fixed class label; samples cycle through classes when omitted
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Score the checkpoints in the run directory
    Eval,
    /// Three-arm alignment conflict experiment from the shared baseline
    Conflict,
    /// PCA pixmap of the prior's features for one dataset image
    Visualize {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            SgaError::config(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn real_main(cli: &Cli) -> Result<i32> {
    let cfg = build_config(cli)?;
    match &cli.cmd {
        Cmd::Verify { out } => {
            let report = run_verification(cfg.seed)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("report.txt"), report.to_table())?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            print!("{}", report.to_table());
            Ok(if report.all_pass() { 0 } else { 1 })
        }
        Cmd::PretrainVae => {
            let ckpt = harness::pretrain_vae(&cfg)?;
            println!("{}", ckpt.display());
            Ok(0)
        }
        Cmd::TrainVae => {
            let ckpt = harness::train_vae(&cfg)?;
            println!("{}", ckpt.display());
            Ok(0)
        }
        Cmd::PretrainDiffusion => {
            let ckpt = harness::pretrain_diffusion(&cfg)?;
            println!("{}", ckpt.display());
            Ok(0)
        }
        Cmd::TrainDiffusion => {
            let ckpt = harness::train_diffusion(&cfg)?;
            println!("{}", ckpt.display());
            Ok(0)
        }
        Cmd::Sample { label, count } => {
            for path in harness::sample_images(&cfg, *label, *count)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
        Cmd::Eval => {
            print!("{}", harness::evaluate_run(&cfg)?);
            Ok(0)
        }
        Cmd::Conflict => {
            print!("{}", harness::run_conflict_experiment(&cfg)?.to_table());
            Ok(0)
        }
        Cmd::Visualize { index } => {
            println!("{}", harness::visualize_prior(&cfg, *index)?.display());
            Ok(0)
        }
    }
}

fn main() {
    // clap itself exits with 2 on malformed invocations
    let cli = Cli::parse();
    let code = match real_main(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SgaError::Divergence { .. } => 3,
                SgaError::Config(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}
