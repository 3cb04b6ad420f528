//! `fusionasr`: runs pipeline stages from a TOML experiment config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fusionasr::error::ErrorClass;
use fusionasr::fusion::FusionMode;
use fusionasr::pipeline::{full_run, run_pipeline, ExperimentConfig, Preset, Stage};
use fusionasr::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "fusionasr", version, about = "Joint CTC/attention ASR with LM fusion and cross-lingual transfer")]
struct Cli {
    /// Experiment config (TOML); desk-scale defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// gen-data, prep, train-seed, train-lm, adapt, decode, score or all.
    #[arg(long, value_name = "NAME")]
    stage: String,
    #[arg(long, value_name = "MODE")]
    fusion: Option<FusionMode>,
    /// Language model checkpoint.
    #[arg(long, value_name = "PATH")]
    lm: Option<PathBuf>,
    /// Seed model checkpoint to adapt from.
    #[arg(long, value_name = "PATH")]
    seed_ckpt: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    beam: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    ctc_weight: Option<f64>,
    #[arg(long, value_name = "FLOAT")]
    lm_weight: Option<f64>,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(Preset::Desk),
    };
    if let Some(f) = cli.fusion {
        cfg.fusion = f;
    }
    if let Some(p) = &cli.lm {
        cfg.lm_checkpoint = Some(p.clone());
    }
    if let Some(p) = &cli.seed_ckpt {
        cfg.seed_checkpoint = Some(p.clone());
    }
    if let Some(b) = cli.beam {
        cfg.decode.beam = b;
    }
    if let Some(w) = cli.ctc_weight {
        cfg.decode.ctc_weight = w;
    }
    if let Some(w) = cli.lm_weight {
        cfg.decode.lm_weight = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.derive_seeds();
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let stages = match cli.stage.as_str() {
        "all" => None,
        s => Some(vec![s.parse::<Stage>()?]),
    };
    let cfg = resolve(cli)?;
    let stages = stages.unwrap_or_else(|| full_run(cfg.fusion));
    for out in run_pipeline(&cfg, &stages)? {
        for path in &out.artifacts {
            println!("{}\t{}", out.stage, path.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
