use crate::config::PipelineConfig;
use crate::io::{smlf, table};
use anyhow::{bail, Context, Result};
use clap::Args;
use smlmforge_core::grid::Image;
use smlmforge_core::render::{max_project, render_2d, render_3d};
use smlmforge_core::simulator::FrameStack;
use std::path::{Path, PathBuf};

/// Render a localization table as a super-resolution image.
#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Input localization CSV.
    #[arg(long)]
    pub table: PathBuf,
    /// Output image (.png or .pgm, 16-bit grayscale).
    #[arg(long)]
    pub out: PathBuf,
    /// 2d: Gaussian splatting onto a pixel grid; 3d: volume splatting plus
    /// clipped maximum projection.
    #[arg(long, default_value = "2d", value_parser = ["2d", "3d"])]
    pub mode: String,
    /// Pipeline configuration providing the render section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// In 3d mode, also write the raw volume as SMLF planes (one frame per
    /// z slice).
    #[arg(long, value_name = "PATH")]
    pub volume_out: Option<PathBuf>,
}

pub fn run(args: &RenderArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let rows = table::read_table(&args.table)
        .with_context(|| format!("reading {}", args.table.display()))?;
    let spec = cfg.render.to_spec();

    let image = match args.mode.as_str() {
        "2d" => {
            let img = render_2d(&rows, &spec).map_err(|e| anyhow::anyhow!("{e}"))?;
            normalize_to_unit(img)
        }
        "3d" => {
            let vol = render_3d(&rows, &spec).map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some(vol_path) = &args.volume_out {
                let stack = FrameStack {
                    width: vol.nx,
                    height: vol.ny,
                    n_frames: vol.nz,
                    pixel_size: spec.voxel[0],
                    data: vol.data.iter().map(|&v| v as f32).collect(),
                };
                smlf::write_smlf(&stack, vol_path)
                    .with_context(|| format!("writing {}", vol_path.display()))?;
            }
            max_project(&vol, &spec)
        }
        other => bail!("unknown render mode `{other}`"),
    };
    write_gray16(&image, &args.out)?;
    eprintln!(
        "rendered {} rows into {}x{} px",
        rows.len(),
        image.width,
        image.height
    );
    Ok(())
}

fn normalize_to_unit(mut img: Image) -> Image {
    let max = img.data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut img.data {
            *v /= max;
        }
    }
    img
}

/// Write a [0, 1] image as 16-bit grayscale PNG or PGM, by extension.
pub fn write_gray16(img: &Image, path: &Path) -> Result<()> {
    let to_u16 = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                img.width as u32,
                img.height as u32,
            );
            for (x, y, px) in buf.enumerate_pixels_mut() {
                *px = image::Luma([to_u16(img.get(x as usize, y as usize))]);
            }
            buf.save(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Some("pgm") => {
            let mut bytes = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
            for v in &img.data {
                bytes.extend_from_slice(&to_u16(*v).to_be_bytes());
            }
            std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        other => bail!(
            "unsupported image extension {:?}; use .png or .pgm",
            other.unwrap_or("")
        ),
    }
    Ok(())
}
