//! Super-resolution rendering: unit-mass Gaussian splatting of localization
//! tables into 2D images and 3D volumes, plus percentile-clipped maximum
//! projection.
//!
//! Each localization deposits the exact per-pixel integral of its Gaussian
//! (erf differences per axis), truncated at 4 sigma, so the total image mass
//! equals the row count up to the truncation tail.

use crate::grid::{Image, Volume};
use crate::table::LocRecord;
use crate::{CoreError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// Splat truncation radius in units of sigma.
const TRUNC_SIGMAS: f64 = 4.0;

/// Which splat width to use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// One isotropic width for every row, in nm.
    Fixed(f64),
    /// Use each row's (sig_x, sig_y, sig_z).
    PerRow,
}

/// Axis-aligned rendering bounds in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds3 {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

/// Rendering configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    /// 2D pixel size in nm.
    pub pixel_size: f64,
    pub sigma: SigmaMode,
    /// 3D voxel size (x, y, z) in nm.
    pub voxel: [f64; 3],
    /// Histogram clip value applied before projection.
    pub clip: f64,
    /// Percentile mapped to full intensity by `max_project`.
    pub percentile: f64,
    /// Explicit bounds; `None` derives them from the data.
    pub bounds: Option<Bounds3>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            pixel_size: 10.0,
            sigma: SigmaMode::Fixed(5.0),
            voxel: [10.0, 10.0, 20.0],
            clip: 2.5,
            percentile: 99.5,
            bounds: None,
        }
    }
}

impl RenderSpec {
    fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0 && self.voxel.iter().all(|&v| v > 0.0)) {
            return Err(CoreError::InvalidParam(
                "render sizes must be positive".into(),
            ));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(CoreError::InvalidParam(
                "percentile must be in (0, 100]".into(),
            ));
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if !(s > 0.0) {
                return Err(CoreError::InvalidParam("fixed sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Bounds that enclose the table's positions with a margin wide enough for
/// the splat truncation radius.
pub fn auto_bounds(table: &[LocRecord], spec: &RenderSpec) -> Bounds3 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut sig_max: f64 = match spec.sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::PerRow => 0.0,
    };
    for r in table {
        for (ax, v) in [r.x, r.y, r.z].into_iter().enumerate() {
            min[ax] = min[ax].min(v);
            max[ax] = max[ax].max(v);
        }
        if let SigmaMode::PerRow = spec.sigma {
            sig_max = sig_max.max(r.sig_x).max(r.sig_y).max(r.sig_z);
        }
    }
    if table.is_empty() {
        min = [0.0; 3];
        max = [spec.pixel_size; 3];
    }
    let margin = TRUNC_SIGMAS * sig_max + spec.pixel_size;
    Bounds3 {
        x: [min[0] - margin, max[0] + margin],
        y: [min[1] - margin, max[1] + margin],
        z: [min[2] - margin, max[2] + margin],
    }
}

/// Per-axis Gaussian mass inside `[lo, hi]`.
fn gauss_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(1e-9) * SQRT_2;
    0.5 * (erf((hi - mu) / s) - erf((lo - mu) / s))
}

fn row_sigmas(r: &LocRecord, mode: SigmaMode) -> [f64; 3] {
    match mode {
        SigmaMode::Fixed(s) => [s, s, s],
        SigmaMode::PerRow => [r.sig_x, r.sig_y, r.sig_z],
    }
}

/// Splat each row as a unit-mass 2D Gaussian on the pixel grid.
pub fn render_2d(table: &[LocRecord], spec: &RenderSpec) -> Result<Image> {
    spec.validate()?;
    let bounds = spec.bounds.unwrap_or_else(|| auto_bounds(table, spec));
    let px = spec.pixel_size;
    let width = (((bounds.x[1] - bounds.x[0]) / px).ceil() as usize).max(1);
    let height = (((bounds.y[1] - bounds.y[0]) / px).ceil() as usize).max(1);
    let mut img = Image::zeros(width, height);

    // Parallel over output row bands; each band scans all table rows in
    // order, so the accumulation order (and thus the result) is independent
    // of the thread count.
    let band_rows = 64usize;
    img.data
        .par_chunks_mut(band_rows * width)
        .enumerate()
        .for_each(|(band, out)| {
            let y_start = band * band_rows;
            let y_end = (y_start + band_rows).min(height);
            for r in table {
                let [sx, sy, _] = row_sigmas(r, spec.sigma);
                let (sx, sy) = (sx.max(1e-9), sy.max(1e-9));
                let y_lo = r.y - TRUNC_SIGMAS * sy;
                let y_hi = r.y + TRUNC_SIGMAS * sy;
                let iy0 = (((y_lo - bounds.y[0]) / px).floor().max(0.0)) as usize;
                let iy1 = ((((y_hi - bounds.y[0]) / px).ceil()) as usize).min(height);
                let (iy0, iy1) = (iy0.max(y_start), iy1.min(y_end));
                if iy0 >= iy1 {
                    continue;
                }
                let x_lo = r.x - TRUNC_SIGMAS * sx;
                let x_hi = r.x + TRUNC_SIGMAS * sx;
                let ix0 = (((x_lo - bounds.x[0]) / px).floor().max(0.0)) as usize;
                let ix1 = ((((x_hi - bounds.x[0]) / px).ceil()) as usize).min(width);
                if ix0 >= ix1 {
                    continue;
                }
                let mass_x: Vec<f64> = (ix0..ix1)
                    .map(|ix| {
                        let lo = bounds.x[0] + ix as f64 * px;
                        gauss_mass(lo, lo + px, r.x, sx)
                    })
                    .collect();
                for iy in iy0..iy1 {
                    let lo = bounds.y[0] + iy as f64 * px;
                    let my = gauss_mass(lo, lo + px, r.y, sy);
                    let row_out = &mut out[(iy - y_start) * width..];
                    for (ix, mx) in (ix0..ix1).zip(&mass_x) {
                        row_out[ix] += mx * my;
                    }
                }
            }
        });
    Ok(img)
}

/// Splat each row as a unit-mass anisotropic 3D Gaussian on the voxel grid.
/// Requires positive per-row sigmas when `SigmaMode::PerRow` is selected.
pub fn render_3d(table: &[LocRecord], spec: &RenderSpec) -> Result<Volume> {
    spec.validate()?;
    if let SigmaMode::PerRow = spec.sigma {
        if table
            .iter()
            .any(|r| !(r.sig_x > 0.0 && r.sig_y > 0.0 && r.sig_z > 0.0))
        {
            return Err(CoreError::InvalidParam(
                "render_3d with per-row sigmas requires positive sig_x, sig_y, sig_z".into(),
            ));
        }
    }
    let bounds = spec.bounds.unwrap_or_else(|| auto_bounds(table, spec));
    let [vx, vy, vz] = spec.voxel;
    let nx = (((bounds.x[1] - bounds.x[0]) / vx).ceil() as usize).max(1);
    let ny = (((bounds.y[1] - bounds.y[0]) / vy).ceil() as usize).max(1);
    let nz = (((bounds.z[1] - bounds.z[0]) / vz).ceil() as usize).max(1);
    let mut vol = Volume::zeros(nx, ny, nz);

    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(iz, slice)| {
            let z_lo = bounds.z[0] + iz as f64 * vz;
            for r in table {
                let [sx, sy, sz] = row_sigmas(r, spec.sigma);
                let mz = gauss_mass(z_lo, z_lo + vz, r.z, sz);
                if (r.z - (z_lo + 0.5 * vz)).abs() > TRUNC_SIGMAS * sz + vz {
                    continue;
                }
                let ix0 = (((r.x - TRUNC_SIGMAS * sx - bounds.x[0]) / vx).floor().max(0.0)) as usize;
                let ix1 = ((((r.x + TRUNC_SIGMAS * sx - bounds.x[0]) / vx).ceil()) as usize).min(nx);
                let iy0 = (((r.y - TRUNC_SIGMAS * sy - bounds.y[0]) / vy).floor().max(0.0)) as usize;
                let iy1 = ((((r.y + TRUNC_SIGMAS * sy - bounds.y[0]) / vy).ceil()) as usize).min(ny);
                if ix0 >= ix1 || iy0 >= iy1 {
                    continue;
                }
                let mass_x: Vec<f64> = (ix0..ix1)
                    .map(|ix| {
                        let lo = bounds.x[0] + ix as f64 * vx;
                        gauss_mass(lo, lo + vx, r.x, sx)
                    })
                    .collect();
                for iy in iy0..iy1 {
                    let lo = bounds.y[0] + iy as f64 * vy;
                    let my = gauss_mass(lo, lo + vy, r.y, sy) * mz;
                    for (ix, mx) in (ix0..ix1).zip(&mass_x) {
                        slice[iy * nx + ix] += mx * my;
                    }
                }
            }
        });
    Ok(vol)
}

/// Clip the volume, take the per-(x, y) maximum over z, and scale so the
/// configured percentile of the projected values maps to 1.0 (clamped above).
pub fn max_project(vol: &Volume, spec: &RenderSpec) -> Image {
    let mut img = Image::zeros(vol.nx, vol.ny);
    for iz in 0..vol.nz {
        for iy in 0..vol.ny {
            for ix in 0..vol.nx {
                let v = vol.data[vol.index(ix, iy, iz)].min(spec.clip);
                let cell = &mut img.data[iy * vol.nx + ix];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    let scale = percentile(&img.data, spec.percentile);
    if scale > 0.0 {
        for v in &mut img.data {
            *v = (*v / scale).min(1.0);
        }
    }
    img
}

/// Linear-interpolation percentile of the values (0 < pct <= 100).
fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = pct / 100.0 * (sorted.len() as f64 - 1.0);
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi.min(sorted.len() - 1)] * t
}
