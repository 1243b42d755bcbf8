use crate::config::{MatchModeSection, PipelineConfig};
use crate::io::table;
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use smlmforge_core::metrics::{
    efficiency, jaccard, match_localizations, rmse, RmseMode,
};
use std::path::PathBuf;

/// Score a localization table against ground truth.
#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted localizations (CSV).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth (CSV; 6-column truth layout accepted).
    #[arg(long)]
    pub truth: PathBuf,
    /// Matching radius in nm.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Matching mode.
    #[arg(long, value_parser = ["lateral", "volume"])]
    pub mode: Option<String>,
    /// Optional pipeline configuration providing metrics defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Report {
    jaccard: f64,
    rmse_lateral: Option<f64>,
    rmse_axial: Option<f64>,
    rmse_volume: Option<f64>,
    eff_lateral: Option<f64>,
    eff_axial: Option<f64>,
    eff_3d: Option<f64>,
    n_tp: usize,
    n_fp: usize,
    n_fn: usize,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let pred = table::read_table(&args.pred)
        .with_context(|| format!("reading {}", args.pred.display()))?;
    let truth = table::read_table(&args.truth)
        .with_context(|| format!("reading {}", args.truth.display()))?;
    let radius = args.radius.unwrap_or(cfg.metrics.radius_nm);
    let mode = match args.mode.as_deref() {
        Some("volume") => MatchModeSection::Volume,
        Some(_) => MatchModeSection::Lateral,
        None => cfg.metrics.mode,
    };

    let m = match_localizations(&pred, &truth, radius, mode.into());
    let j = jaccard(&m);
    let rmse_lateral = rmse(&m, &pred, &truth, RmseMode::Lateral);
    let rmse_axial = rmse(&m, &pred, &truth, RmseMode::Axial);
    let rmse_volume = rmse(&m, &pred, &truth, RmseMode::Volume);
    let eff_lateral = rmse_lateral.map(|r| efficiency(j, r, cfg.metrics.alpha_lateral));
    let eff_axial = rmse_axial.map(|r| efficiency(j, r, cfg.metrics.alpha_axial));
    let eff_3d = match (eff_lateral, eff_axial) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };

    let report = Report {
        jaccard: j,
        rmse_lateral,
        rmse_axial,
        rmse_volume,
        eff_lateral,
        eff_axial,
        eff_3d,
        n_tp: m.tp,
        n_fp: m.fp,
        n_fn: m.n_fn,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
