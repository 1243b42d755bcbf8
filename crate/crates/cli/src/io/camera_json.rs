//! Camera model documents. EMCCD cameras are fully inline; sCMOS read-noise
//! variance is either a constant or a raw little-endian f32 per-pixel map.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use smlmforge_core::camera::{Camera, CameraEmccd, CameraScmos, VarMap};
use smlmforge_core::grid::Image;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarSection {
    Constant { constant: f64 },
    File { file: String, width: usize, height: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CameraSection {
    Emccd {
        baseline: f64,
        em_gain: f64,
        e_per_count: f64,
        background: f64,
    },
    Scmos {
        baseline: f64,
        gain: f64,
        background: f64,
        var: VarSection,
    },
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection::Emccd {
            baseline: 100.0,
            em_gain: 300.0,
            e_per_count: 45.0,
            background: 10.0,
        }
    }
}

impl CameraSection {
    /// Materialize the camera; `base_dir` resolves a variance-map file.
    pub fn build(&self, base_dir: &Path) -> Result<Camera> {
        let camera = match self {
            CameraSection::Emccd {
                baseline,
                em_gain,
                e_per_count,
                background,
            } => Camera::Emccd(CameraEmccd {
                baseline: *baseline,
                em_gain: *em_gain,
                e_per_count: *e_per_count,
                background: *background,
            }),
            CameraSection::Scmos {
                baseline,
                gain,
                background,
                var,
            } => {
                let var_map = match var {
                    VarSection::Constant { constant } => VarMap::Constant(*constant),
                    VarSection::File { file, width, height } => {
                        let path = base_dir.join(file);
                        let bytes = std::fs::read(&path)
                            .with_context(|| format!("reading variance map {}", path.display()))?;
                        if bytes.len() != width * height * 4 {
                            bail!(
                                "variance map {} holds {} bytes, expected {}",
                                path.display(),
                                bytes.len(),
                                width * height * 4
                            );
                        }
                        let data = bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                            .collect();
                        VarMap::Map(Image {
                            width: *width,
                            height: *height,
                            data,
                        })
                    }
                };
                Camera::Scmos(CameraScmos {
                    baseline: *baseline,
                    gain: *gain,
                    var_map,
                    background: *background,
                })
            }
        };
        camera
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid camera: {e}"))?;
        Ok(camera)
    }
}

pub fn read_camera_json(path: &Path) -> Result<Camera> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading camera file {}", path.display()))?;
    let section: CameraSection =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    section.build(path.parent().unwrap_or_else(|| Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emccd_document_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.json");
        std::fs::write(
            &path,
            r#"{"kind":"emccd","baseline":100,"em_gain":300,"e_per_count":45,"background":10}"#,
        )
        .unwrap();
        let cam = read_camera_json(&path).unwrap();
        assert!(matches!(cam, Camera::Emccd(_)));
    }

    #[test]
    fn scmos_with_variance_file() {
        let dir = tempfile::tempdir().unwrap();
        let var_path = dir.path().join("var.raw");
        let values: Vec<f32> = (0..6).map(|i| 20.0 + i as f32).collect();
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&var_path, bytes).unwrap();
        let path = dir.path().join("cam.json");
        std::fs::write(
            &path,
            r#"{"kind":"scmos","baseline":50,"gain":2.2,"background":5,
               "var":{"file":"var.raw","width":3,"height":2}}"#,
        )
        .unwrap();
        let cam = read_camera_json(&path).unwrap();
        match cam {
            Camera::Scmos(c) => match c.var_map {
                VarMap::Map(img) => {
                    assert_eq!(img.get(2, 1), 25.0);
                }
                _ => panic!("expected map"),
            },
            _ => panic!("expected scmos"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.json");
        std::fs::write(
            &path,
            r#"{"kind":"emccd","baseline":100,"em_gain":300,"e_per_count":45,"background":10,"bogus":1}"#,
        )
        .unwrap();
        assert!(read_camera_json(&path).is_err());
    }
}
