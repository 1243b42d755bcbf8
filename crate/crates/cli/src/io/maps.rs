//! Output-map serialization: nine raw little-endian f32 planes plus a JSON
//! sidecar naming the channels, for cross-implementation comparisons.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smlmforge_core::grid::GridSpec;
use smlmforge_core::loss::OutputMaps;
use std::path::Path;

pub const CHANNELS: [&str; 9] = [
    "p", "alpha", "dx", "dy", "dz", "sig_alpha", "sig_x", "sig_y", "sig_z",
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsSidecar {
    pub width: usize,
    pub height: usize,
    pub pixel_size_nm: f64,
    pub channels: Vec<String>,
    pub data_file: String,
}

pub fn write_maps(maps: &OutputMaps, sidecar_path: &Path) -> Result<()> {
    let stem = sidecar_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "maps".into());
    let data_file = format!("{stem}.raw");
    let data_path = sidecar_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);

    let planes: [&Vec<f64>; 9] = [
        &maps.p,
        &maps.alpha,
        &maps.dx,
        &maps.dy,
        &maps.dz,
        &maps.sig_alpha,
        &maps.sig_x,
        &maps.sig_y,
        &maps.sig_z,
    ];
    let mut bytes = Vec::with_capacity(9 * maps.p.len() * 4);
    for plane in planes {
        for &v in plane.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(&data_path, bytes)
        .with_context(|| format!("writing map planes {}", data_path.display()))?;

    let sidecar = MapsSidecar {
        width: maps.grid.width,
        height: maps.grid.height,
        pixel_size_nm: maps.grid.pixel_size,
        channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
        data_file,
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)
        .with_context(|| format!("writing sidecar {}", sidecar_path.display()))?;
    Ok(())
}

pub fn read_maps(sidecar_path: &Path) -> Result<OutputMaps> {
    let text = std::fs::read_to_string(sidecar_path)
        .with_context(|| format!("reading sidecar {}", sidecar_path.display()))?;
    let sidecar: MapsSidecar = serde_json::from_str(&text)?;
    if sidecar.channels != CHANNELS {
        bail!("sidecar channels {:?} do not match {CHANNELS:?}", sidecar.channels);
    }
    let data_path = sidecar_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&sidecar.data_file);
    let bytes = std::fs::read(&data_path)
        .with_context(|| format!("reading map planes {}", data_path.display()))?;
    let n = sidecar.width * sidecar.height;
    if bytes.len() != 9 * n * 4 {
        bail!(
            "map planes hold {} bytes, expected {}",
            bytes.len(),
            9 * n * 4
        );
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let plane = |i: usize| values[i * n..(i + 1) * n].to_vec();
    Ok(OutputMaps {
        grid: GridSpec::new(sidecar.width, sidecar.height, sidecar.pixel_size_nm),
        p: plane(0),
        alpha: plane(1),
        dx: plane(2),
        dy: plane(3),
        dz: plane(4),
        sig_alpha: plane(5),
        sig_x: plane(6),
        sig_y: plane(7),
        sig_z: plane(8),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.json");
        let grid = GridSpec::new(4, 3, 100.0);
        let mut maps = OutputMaps::zeros(grid);
        maps.p[5] = 0.75;
        maps.dz[2] = -120.5;
        maps.sig_alpha[11] = 42.0;
        write_maps(&maps, &path).unwrap();
        let back = read_maps(&path).unwrap();
        assert_eq!(back.grid, grid);
        assert_eq!(back.p[5], 0.75);
        assert_eq!(back.dz[2], -120.5);
        assert_eq!(back.sig_alpha[11], 42.0);
    }
}
