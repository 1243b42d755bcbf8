//! Forward simulation: blinking-prior emitter tracks, mean images and noisy
//! frame stacks.
//!
//! Randomness is organized in independent ChaCha streams derived from one
//! seed: stream 0 samples the emitter tracks, stream `t + 1` samples frame
//! `t`'s camera noise. Frames can therefore be generated in parallel with
//! output identical to the serial order.

use crate::camera::Camera;
use crate::grid::{GridSpec, Image};
use crate::psf::PsfModel;
use crate::table::TruthRecord;
use crate::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Blinking prior and field geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Per-pixel per-frame activation probability.
    pub p_on: f64,
    /// Per-frame deactivation probability of an active emitter.
    pub p_off: f64,
    /// Std of the Gaussian z prior in nm.
    pub z_sigma: f64,
    /// Maximum expected brightness of one emitter per frame, in counts.
    pub max_brightness: f64,
    /// Field width in pixels.
    pub width: usize,
    /// Field height in pixels.
    pub height: usize,
    pub n_frames: usize,
    /// Mean of the z prior in nm.
    pub focal_plane_z: f64,
    /// Camera pixel pitch in nm.
    pub pixel_size: f64,
    /// Keep one brightness per track instead of resampling every frame.
    pub constant_brightness: bool,
    /// Lower edge of the uniform brightness band, as a fraction of
    /// `max_brightness` (photons are `U(min_brightness_frac, 1) * max`).
    pub min_brightness_frac: f64,
    /// Per-frame (dx, dz) shift in nm applied to active emitters, as in
    /// light-sheet scanning. `None` disables drift.
    pub drift_per_frame: Option<[f64; 2]>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            p_on: 1e-4,
            p_off: 0.5,
            z_sigma: 200.0,
            max_brightness: 5000.0,
            width: 64,
            height: 64,
            n_frames: 100,
            focal_plane_z: 0.0,
            pixel_size: 100.0,
            constant_brightness: false,
            min_brightness_frac: 0.1,
            drift_per_frame: None,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_on) {
            return Err(CoreError::InvalidParam("p_on must be in [0, 1]".into()));
        }
        if !(self.p_off > 0.0 && self.p_off <= 1.0) {
            return Err(CoreError::InvalidParam("p_off must be in (0, 1]".into()));
        }
        if self.z_sigma <= 0.0 || self.max_brightness <= 0.0 || self.pixel_size <= 0.0 {
            return Err(CoreError::InvalidParam(
                "z_sigma, max_brightness and pixel_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_brightness_frac) {
            return Err(CoreError::InvalidParam(
                "min_brightness_frac must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.width, self.height, self.pixel_size)
    }
}

/// One fluorophore's lifetime: activation frame, per-frame positions (constant
/// unless drift is applied) and per-frame photon counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EmitterTrack {
    pub id: u64,
    pub t_start: u32,
    /// Inclusive.
    pub t_end: u32,
    /// Position per active frame, `t_end - t_start + 1` entries.
    pub positions: Vec<[f64; 3]>,
    /// Photons per active frame, same length as `positions`.
    pub photons: Vec<f64>,
}

impl EmitterTrack {
    pub fn n_frames(&self) -> usize {
        (self.t_end - self.t_start + 1) as usize
    }

    pub fn active_at(&self, t: u32) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    pub fn position_at(&self, t: u32) -> [f64; 3] {
        self.positions[(t - self.t_start) as usize]
    }

    pub fn photons_at(&self, t: u32) -> f64 {
        self.photons[(t - self.t_start) as usize]
    }
}

/// Sample emitter tracks from the blinking prior.
///
/// Each (frame, pixel) activates independently with probability `p_on`; the
/// lifetime is geometric with parameter `p_off` (truncated at the end of the
/// stack); the lateral position is uniform in the activating pixel; z is
/// Gaussian around the focal plane; photons are `U(0.1, 1) * max_brightness`
/// per active frame.
pub fn sample_tracks(cfg: &PriorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<EmitterTrack>> {
    cfg.validate()?;
    let z_dist = Normal::new(cfg.focal_plane_z, cfg.z_sigma)
        .map_err(|e| CoreError::InvalidParam(format!("z prior: {e}")))?;
    let mut tracks = Vec::new();
    let mut id = 0u64;
    for t in 0..cfg.n_frames {
        for py in 0..cfg.height {
            for px in 0..cfg.width {
                if rng.random::<f64>() >= cfg.p_on {
                    continue;
                }
                let x = (px as f64 + rng.random::<f64>()) * cfg.pixel_size;
                let y = (py as f64 + rng.random::<f64>()) * cfg.pixel_size;
                let z = z_dist.sample(rng);
                // Lifetime: 1 + number of failures before the first turn-off.
                let mut lifetime = 1usize;
                while rng.random::<f64>() >= cfg.p_off {
                    lifetime += 1;
                }
                let t_end = (t + lifetime - 1).min(cfg.n_frames - 1);
                let n = t_end - t + 1;
                let lo = cfg.min_brightness_frac;
                let span = 1.0 - lo;
                let photons = if cfg.constant_brightness {
                    let p = (lo + span * rng.random::<f64>()) * cfg.max_brightness;
                    vec![p; n]
                } else {
                    (0..n)
                        .map(|_| (lo + span * rng.random::<f64>()) * cfg.max_brightness)
                        .collect()
                };
                tracks.push(EmitterTrack {
                    id,
                    t_start: t as u32,
                    t_end: t_end as u32,
                    positions: vec![[x, y, z]; n],
                    photons,
                });
                id += 1;
            }
        }
    }
    Ok(tracks)
}

/// Shift each track's position in frame `t_start + k` by `k * (dx, 0, dz)`.
/// The first active frame keeps the sampled position.
pub fn apply_lls_drift(tracks: &mut [EmitterTrack], dx_per_frame: f64, dz_per_frame: f64) {
    for track in tracks {
        for (k, pos) in track.positions.iter_mut().enumerate() {
            pos[0] += k as f64 * dx_per_frame;
            pos[2] += k as f64 * dz_per_frame;
        }
    }
}

/// Mean image (counts above baseline) of the tracks active in frame `t`:
/// the sum of the emitters' PSF patches plus the constant background.
pub fn mean_frame(
    tracks: &[EmitterTrack],
    t: u32,
    psf: &PsfModel,
    background: f64,
    grid: &GridSpec,
) -> Image {
    let mut img = Image {
        width: grid.width,
        height: grid.height,
        data: vec![background; grid.n_pixels()],
    };
    for track in tracks.iter().filter(|tr| tr.active_at(t)) {
        let [x, y, z] = track.position_at(t);
        psf.add_patch(&mut img, x, y, z, track.photons_at(t), grid, 1);
    }
    img
}

/// A time-ordered stack of 2D frames in camera counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub pixel_size: f64,
    /// Row-major pixels, frames consecutive.
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.width, self.height, self.pixel_size)
    }
}

/// Simulate a full stack: sample tracks, apply optional drift, then per frame
/// build the mean image and draw camera noise. Returns the stack and the
/// ground-truth emission table (one row per track per active frame).
pub fn simulate_stack(
    cfg: &PriorConfig,
    psf: &PsfModel,
    camera: &Camera,
    seed: u64,
) -> Result<(FrameStack, Vec<TruthRecord>)> {
    cfg.validate()?;
    camera.validate()?;
    let grid = cfg.grid();

    let mut track_rng = ChaCha8Rng::seed_from_u64(seed);
    track_rng.set_stream(0);
    let mut tracks = sample_tracks(cfg, &mut track_rng)?;
    if let Some([dx, dz]) = cfg.drift_per_frame {
        apply_lls_drift(&mut tracks, dx, dz);
    }

    let baseline = camera.baseline();
    let background = camera.background();
    let frames: Vec<Result<Vec<f32>>> = (0..cfg.n_frames)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let mut mean = mean_frame(&tracks, t as u32, psf, background, &grid);
            for v in &mut mean.data {
                *v += baseline;
            }
            camera.sample_frame(&mean, &mut rng)
        })
        .collect();

    let mut data = Vec::with_capacity(grid.n_pixels() * cfg.n_frames);
    for frame in frames {
        data.extend_from_slice(&frame?);
    }

    let mut truth = Vec::new();
    for track in &tracks {
        for t in track.t_start..=track.t_end {
            let [x, y, z] = track.position_at(t);
            truth.push(TruthRecord {
                frame: t,
                id: track.id,
                x,
                y,
                z,
                photons: track.photons_at(t),
            });
        }
    }
    truth.sort_by_key(|r| (r.frame, r.id));

    Ok((
        FrameStack {
            width: cfg.width,
            height: cfg.height,
            n_frames: cfg.n_frames,
            pixel_size: cfg.pixel_size,
            data,
        },
        truth,
    ))
}
