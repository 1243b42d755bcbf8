use crate::config::PipelineConfig;
use crate::io::{smlf, table};
use anyhow::{Context, Result};
use clap::Args;
use smlmforge_core::simulator::simulate_stack;
use std::path::PathBuf;

/// Sample emitter tracks from the blinking prior and write a noisy frame
/// stack plus its ground-truth table.
#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output SMLF stack.
    #[arg(long)]
    pub out: PathBuf,
    /// Output ground-truth CSV.
    #[arg(long)]
    pub truth: PathBuf,
}

pub fn run(args: &SimulateArgs, seed: u64) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let base = args
        .config
        .as_deref()
        .and_then(|p| p.parent())
        .unwrap_or_else(|| std::path::Path::new("."))
        .to_path_buf();
    let psf = cfg.psf.build(&base)?;
    let camera = cfg.camera.build(&base)?;
    let (stack, truth) =
        simulate_stack(&cfg.prior, &psf, &camera, seed).context("simulating stack")?;
    smlf::write_smlf(&stack, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    table::write_truth(&truth, &args.truth)
        .with_context(|| format!("writing {}", args.truth.display()))?;
    eprintln!(
        "simulated {} frames ({}x{} px), {} ground-truth emissions",
        stack.n_frames,
        stack.width,
        stack.height,
        truth.len()
    );
    Ok(())
}
