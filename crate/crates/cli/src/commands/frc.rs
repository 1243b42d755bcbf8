use crate::config::PipelineConfig;
use crate::io::table;
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use smlmforge_core::frc::{frc_curve, frc_resolution};
use smlmforge_core::metrics::split_even_odd_blocks;
use smlmforge_core::render::{auto_bounds, render_2d, Bounds3};
use std::io::Write;
use std::path::PathBuf;

/// Estimate reconstruction resolution by Fourier ring correlation of two
/// half-data renderings.
#[derive(Args, Debug)]
pub struct FrcArgs {
    /// Input localization CSV (time-ordered).
    #[arg(long)]
    pub table: PathBuf,
    /// Curve CSV output (freq_per_nm, correlation, samples).
    #[arg(long, value_name = "PATH")]
    pub out_curve: PathBuf,
    /// Resolution JSON output.
    #[arg(long, value_name = "PATH")]
    pub out_resolution: PathBuf,
    /// Pipeline configuration for the metrics/render sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Consecutive-localization block size for the even/odd split.
    #[arg(long, value_name = "N")]
    pub block_size: Option<usize>,
    /// Correlation threshold of the resolution criterion.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Serialize)]
struct ResolutionReport {
    resolution_nm: f64,
    crossed: bool,
    threshold: f64,
    render_pixel_nm: f64,
    n_rows: usize,
}

pub fn run(args: &FrcArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let rows = table::read_table(&args.table)
        .with_context(|| format!("reading {}", args.table.display()))?;
    let block_size = args.block_size.unwrap_or(cfg.metrics.frc_block_size);
    let threshold = args.threshold.unwrap_or(cfg.metrics.frc_threshold);

    let (half_a, half_b) = split_even_odd_blocks(&rows, block_size);
    let mut spec = cfg.render.to_spec();
    // Both halves must land on one square grid for the ring correlation.
    spec.bounds = Some(square_bounds(auto_bounds(&rows, &spec)));
    let img_a = render_2d(&half_a, &spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    let img_b = render_2d(&half_b, &spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    let curve =
        frc_curve(&img_a, &img_b, spec.pixel_size).map_err(|e| anyhow::anyhow!("{e}"))?;
    let res = frc_resolution(&curve, threshold).map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(&args.out_curve)?);
    writeln!(w, "freq_per_nm,correlation,samples")?;
    for i in 0..curve.freq.len() {
        writeln!(w, "{},{},{}", curve.freq[i], curve.corr[i], curve.counts[i])?;
    }
    w.flush()?;

    let report = ResolutionReport {
        resolution_nm: res.resolution,
        crossed: res.crossed,
        threshold,
        render_pixel_nm: spec.pixel_size,
        n_rows: rows.len(),
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    std::fs::write(&args.out_resolution, &text)
        .with_context(|| format!("writing {}", args.out_resolution.display()))?;
    Ok(())
}

/// Expand the shorter lateral side so the rendered image comes out square.
fn square_bounds(mut b: Bounds3) -> Bounds3 {
    let span_x = b.x[1] - b.x[0];
    let span_y = b.y[1] - b.y[0];
    let span = span_x.max(span_y);
    let grow = |range: &mut [f64; 2], target: f64| {
        let extra = (target - (range[1] - range[0])) / 2.0;
        range[0] -= extra;
        range[1] += extra;
    };
    grow(&mut b.x, span);
    grow(&mut b.y, span);
    b
}
