//! PSF model documents: a JSON file carrying the parametric kind and
//! parameters, plus an optional pixel-map descriptor whose node values live
//! in a sidecar raw little-endian f32 file (resolved relative to the JSON).

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smlmforge_core::psf::{Parametric, PixelMap3D, PsfModel};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixmapDescriptor {
    pub dims: [usize; 3],
    pub pixel_size_xy: f64,
    pub z_spacing: f64,
    #[serde(default)]
    pub origin: [f64; 3],
    pub data_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PsfDocument {
    #[serde(flatten)]
    pub parametric: Parametric,
    #[serde(default)]
    pub pixmap: Option<PixmapDescriptor>,
}

pub fn read_psf_json(path: &Path) -> Result<PsfModel> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading PSF file {}", path.display()))?;
    let doc: PsfDocument =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    doc.parametric
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid PSF parameters: {e}"))?;
    let pixmap = match doc.pixmap {
        None => None,
        Some(desc) => {
            let data_path = path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&desc.data_file);
            let bytes = std::fs::read(&data_path)
                .with_context(|| format!("reading pixel map {}", data_path.display()))?;
            let [nx, ny, nz] = desc.dims;
            let expected = nx * ny * nz * 4;
            if bytes.len() != expected {
                bail!(
                    "pixel map {} holds {} bytes, expected {expected}",
                    data_path.display(),
                    bytes.len()
                );
            }
            let values: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Some(
                PixelMap3D::new(nx, ny, nz, desc.pixel_size_xy, desc.z_spacing, desc.origin, values)
                    .map_err(|e| anyhow::anyhow!("invalid pixel map: {e}"))?,
            )
        }
    };
    Ok(PsfModel {
        parametric: doc.parametric,
        pixmap,
    })
}

/// Write a PSF document; when the model carries a pixel map, its values go
/// to `<stem>.pixmap.raw` next to the JSON.
pub fn write_psf_json(model: &PsfModel, path: &Path) -> Result<()> {
    let pixmap = match &model.pixmap {
        None => None,
        Some(map) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "psf".into());
            let data_file = format!("{stem}.pixmap.raw");
            let data_path = path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&data_file);
            let mut bytes = Vec::with_capacity(map.values.len() * 4);
            for &v in &map.values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            std::fs::write(&data_path, bytes)
                .with_context(|| format!("writing pixel map {}", data_path.display()))?;
            Some(PixmapDescriptor {
                dims: [map.nx, map.ny, map.nz],
                pixel_size_xy: map.pixel_size_xy,
                z_spacing: map.z_spacing,
                origin: map.origin,
                data_file,
            })
        }
    };
    let doc = PsfDocument {
        parametric: model.parametric,
        pixmap,
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing PSF file {}", path.display()))?;
    Ok(())
}
