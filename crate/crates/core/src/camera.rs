//! Camera noise models.
//!
//! Both camera types are approximated by per-pixel Gamma distributions:
//!
//! * EMCCD: `I ~ Gamma((mean - BL)/eta, eta) + BL` with `eta = 2 EM / EC`.
//!   Moments: mean `mean`, variance `eta * (mean - BL)`.
//! * sCMOS: `I ~ Gamma(mean/eta, eta)` with
//!   `eta = (Var(x,y) + g (mean - BL)) / mean`, where `Var` is the per-pixel
//!   read-noise variance estimated from dark images. Moments: mean `mean`,
//!   variance `Var + g (mean - BL)`.
//!
//! `mean` is the expected count value of the pixel including the baseline.
//! The same densities drive both sampling and the negative log-likelihoods
//! used by the fitting code, so fitted uncertainties are calibrated against
//! the simulation by construction.

use crate::grid::Image;
use crate::{CoreError, Result};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

/// EMCCD camera: baseline, electron-multiplying gain, electron conversion
/// factor and homogeneous background (counts above baseline).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraEmccd {
    pub baseline: f64,
    pub em_gain: f64,
    pub e_per_count: f64,
    pub background: f64,
}

impl CameraEmccd {
    /// Excess-noise factor `eta = 2 EM / EC`.
    pub fn eta(&self) -> f64 {
        2.0 * self.em_gain / self.e_per_count
    }
}

/// Per-pixel read-noise variance of an sCMOS sensor, in counts^2.
#[derive(Debug, Clone, PartialEq)]
pub enum VarMap {
    Constant(f64),
    /// Row-major per-pixel map; dimensions must match the imaged field.
    Map(Image),
}

impl VarMap {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        match self {
            VarMap::Constant(v) => *v,
            VarMap::Map(img) => img.get(ix, iy),
        }
    }
}

/// sCMOS camera: baseline, gain, read-noise variance map and background.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraScmos {
    pub baseline: f64,
    pub gain: f64,
    pub var_map: VarMap,
    pub background: f64,
}

/// Either camera model.
#[derive(Debug, Clone, PartialEq)]
pub enum Camera {
    Emccd(CameraEmccd),
    Scmos(CameraScmos),
}

impl Camera {
    pub fn baseline(&self) -> f64 {
        match self {
            Camera::Emccd(c) => c.baseline,
            Camera::Scmos(c) => c.baseline,
        }
    }

    pub fn background(&self) -> f64 {
        match self {
            Camera::Emccd(c) => c.background,
            Camera::Scmos(c) => c.background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Camera::Emccd(c) => {
                if !(c.em_gain > 0.0 && c.e_per_count > 0.0 && c.background >= 0.0) {
                    return Err(CoreError::InvalidParam(
                        "emccd requires EM > 0, EC > 0, background >= 0".into(),
                    ));
                }
            }
            Camera::Scmos(c) => {
                if !(c.gain > 0.0 && c.background >= 0.0) {
                    return Err(CoreError::InvalidParam(
                        "scmos requires gain > 0, background >= 0".into(),
                    ));
                }
                if let VarMap::Map(m) = &c.var_map {
                    if m.data.iter().any(|&v| v < 0.0) {
                        return Err(CoreError::InvalidParam(
                            "scmos variance map must be non-negative".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shape/scale of the Gamma for one pixel given the full mean (incl. BL).
    /// For EMCCD the sample additionally gets the baseline added back.
    fn gamma_params(&self, mean: f64, ix: usize, iy: usize) -> Result<(f64, f64, f64)> {
        match self {
            Camera::Emccd(c) => {
                let eta = c.eta();
                if mean <= c.baseline {
                    return Err(CoreError::CameraDomain(format!(
                        "emccd mean {mean} <= baseline {}",
                        c.baseline
                    )));
                }
                Ok(((mean - c.baseline) / eta, eta, c.baseline))
            }
            Camera::Scmos(c) => {
                if mean <= 0.0 {
                    return Err(CoreError::CameraDomain(format!("scmos mean {mean} <= 0")));
                }
                let eta = (c.var_map.at(ix, iy) + c.gain * (mean - c.baseline)) / mean;
                if eta <= 0.0 {
                    return Err(CoreError::CameraDomain(format!(
                        "scmos eta {eta} <= 0 at pixel ({ix}, {iy})"
                    )));
                }
                Ok((mean / eta, eta, 0.0))
            }
        }
    }

    /// Draw one noisy pixel from the camera model.
    pub fn sample_pixel<R: Rng + ?Sized>(
        &self,
        mean: f64,
        ix: usize,
        iy: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let (shape, scale, offset) = self.gamma_params(mean, ix, iy)?;
        let gamma = Gamma::new(shape, scale)
            .map_err(|e| CoreError::CameraDomain(format!("gamma({shape}, {scale}): {e}")))?;
        Ok(gamma.sample(rng) + offset)
    }

    /// Sample a whole frame of noisy counts from its mean image.
    pub fn sample_frame<R: Rng + ?Sized>(&self, mean: &Image, rng: &mut R) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(mean.data.len());
        for iy in 0..mean.height {
            for ix in 0..mean.width {
                out.push(self.sample_pixel(mean.get(ix, iy), ix, iy, rng)? as f32);
            }
        }
        Ok(out)
    }

    /// Negative log density of an observed count given the pixel mean.
    /// Returns +inf when the mean is outside the model's domain, which the
    /// optimizers treat as a rejected step.
    pub fn nll_pixel(&self, obs: f64, mean: f64, ix: usize, iy: usize) -> f64 {
        let Ok((shape, scale, offset)) = self.gamma_params(mean, ix, iy) else {
            return f64::INFINITY;
        };
        let x = obs - offset;
        if x <= 0.0 {
            return f64::INFINITY;
        }
        -((shape - 1.0) * x.ln() - x / scale - shape * scale.ln() - ln_gamma(shape))
    }

    /// Derivative of [`Camera::nll_pixel`] with respect to the mean.
    pub fn dnll_dmean(&self, obs: f64, mean: f64, ix: usize, iy: usize) -> f64 {
        match self {
            Camera::Emccd(c) => {
                let eta = c.eta();
                let x = obs - c.baseline;
                if mean <= c.baseline || x <= 0.0 {
                    return f64::NAN;
                }
                let shape = (mean - c.baseline) / eta;
                (eta.ln() + digamma(shape) - x.ln()) / eta
            }
            Camera::Scmos(c) => {
                if mean <= 0.0 || obs <= 0.0 {
                    return f64::NAN;
                }
                let var = c.var_map.at(ix, iy);
                let d = var + c.gain * (mean - c.baseline);
                if d <= 0.0 {
                    return f64::NAN;
                }
                let shape = mean * mean / d;
                let eta = d / mean;
                let dshape = (2.0 * mean * d - mean * mean * c.gain) / (d * d);
                let deta = (c.gain * mean - d) / (mean * mean);
                -(dshape * obs.ln() + obs * deta / (eta * eta)
                    - dshape * eta.ln()
                    - shape * deta / eta
                    - digamma(shape) * dshape)
            }
        }
    }
}
