//! Classical detect-then-fit localization: candidate detection on smoothed
//! frames, per-ROI maximum-likelihood PSF fitting under the camera noise
//! model, and uncertainties from the inverse observed Fisher information.

use crate::camera::Camera;
use crate::grid::GridSpec;
use crate::psf::PsfModel;
use crate::simulator::FrameStack;
use crate::table::{LocRecord, LocalizationTable};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Candidate detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Detection threshold in units of the robust noise scale.
    pub k_sigma: f64,
    /// Gaussian pre-smoothing width in pixels.
    pub smooth_sigma: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k_sigma: 4.0,
            smooth_sigma: 1.5,
        }
    }
}

/// A detection candidate: a local maximum of the smoothed, background-
/// subtracted frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub ix: usize,
    pub iy: usize,
    /// Smoothed, background-subtracted intensity at the peak.
    pub value: f64,
}

/// ROI fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Square ROI side length in pixels.
    pub roi_size: usize,
    pub max_iters: usize,
    /// Relative objective-change convergence tolerance.
    pub tol: f64,
    /// Axial initialization grid in nm; the best-scoring entry seeds the fit.
    pub z_init: Vec<f64>,
    /// Rows whose fitted photons fall below this many photon-sigmas are
    /// treated as noise fits and dropped by `localize_stack`. 0 disables.
    pub min_photon_significance: f64,
    /// Goodness-of-fit gate: reject fits whose deviance exceeds the residual
    /// degrees of freedom by this many deviance-sigmas (flags ROIs that hold
    /// more than one emitter). 0 disables.
    pub max_deviance_sigmas: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            roi_size: 13,
            max_iters: 100,
            tol: 1e-10,
            z_init: vec![-400.0, -200.0, 0.0, 200.0, 400.0],
            min_photon_significance: 4.0,
            max_deviance_sigmas: 5.0,
        }
    }
}

/// Result of one ROI fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiFit {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub photons: f64,
    pub background: f64,
    /// Per-axis localization uncertainty from the inverse observed Fisher
    /// information; infinity when the fit failed or the Hessian was not
    /// positive definite.
    pub sigma: [f64; 3],
    /// Uncertainty of the fitted photon count, same source as `sigma`.
    pub sigma_photons: f64,
    pub converged: bool,
    /// Another candidate sat closer than half the ROI size.
    pub crowded: bool,
    /// The ROI was clipped at the frame border.
    pub shrunk: bool,
    pub nll: f64,
    /// Model deviance `2 (nll(fit) - nll(saturated))`; roughly chi-squared
    /// with `n_pixels - 5` degrees of freedom when the single-emitter model
    /// holds.
    pub deviance: f64,
    /// Residual degrees of freedom of the ROI.
    pub dof: usize,
}

impl RoiFit {
    /// Wald-style significance gate: the fitted photon count must exceed
    /// `k` times its own uncertainty.
    pub fn min_significance_ok(&self, k: f64) -> bool {
        if k <= 0.0 {
            return true;
        }
        self.sigma_photons.is_finite() && self.photons > k * self.sigma_photons
    }

    /// Goodness-of-fit gate: deviance within `k` sigmas of its chi-squared
    /// expectation. A strong excess indicates overlapping emitters.
    pub fn deviance_ok(&self, k: f64) -> bool {
        if k <= 0.0 {
            return true;
        }
        let dof = self.dof as f64;
        self.deviance <= dof + k * (2.0 * dof).sqrt()
    }
}

/// Median of a slice (copies; not for hot paths).
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Separable Gaussian blur of median-centered data. Out-of-field samples
/// count as zero, which damps rather than amplifies border noise.
fn gaussian_smooth(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|w| w / norm).collect();
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * data[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Find candidate emitters in one frame: strict 3x3 maxima of the smoothed,
/// median-subtracted image above `k_sigma` times the robust noise scale
/// (1.4826 * MAD).
pub fn detect_candidates(
    frame: &[f32],
    width: usize,
    height: usize,
    cfg: &DetectConfig,
) -> Vec<Candidate> {
    let as_f64: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let bg = median(&as_f64);
    let centered: Vec<f64> = as_f64.iter().map(|v| v - bg).collect();
    let smoothed = gaussian_smooth(&centered, width, height, cfg.smooth_sigma);
    let med = median(&smoothed);
    let dev: Vec<f64> = smoothed.iter().map(|v| (v - med).abs()).collect();
    let noise = 1.4826 * median(&dev);
    let threshold = med + cfg.k_sigma * noise;

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            f64::NEG_INFINITY
        } else {
            smoothed[y as usize * width + x as usize]
        }
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            let v = at(x, y);
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx != 0 || dy != 0) && at(x + dx, y + dy) >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push(Candidate {
                    ix: x as usize,
                    iy: y as usize,
                    value: v,
                });
            }
        }
    }
    out
}

/// The five fit parameters: x, y, z (nm), photons, background (counts above
/// baseline).
const N_PARAMS: usize = 5;

struct Roi<'a> {
    obs: Vec<f64>,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    grid: &'a GridSpec,
    psf: &'a PsfModel,
    camera: &'a Camera,
}

impl Roi<'_> {
    fn nll(&self, theta: &[f64; N_PARAMS]) -> f64 {
        let [x, y, z, photons, bg] = *theta;
        if photons <= 0.0 || bg < 0.0 {
            return f64::INFINITY;
        }
        let baseline = self.camera.baseline();
        let mut total = 0.0;
        for ry in 0..self.h {
            for rx in 0..self.w {
                let (ix, iy) = (self.x0 + rx, self.y0 + ry);
                let (cx, cy) = self.grid.center(ix, iy);
                let mean = baseline + bg + photons * self.psf.eval(cx - x, cy - y, -z);
                let v = self.camera.nll_pixel(self.obs[ry * self.w + rx], mean, ix, iy);
                if !v.is_finite() {
                    return f64::INFINITY;
                }
                total += v;
            }
        }
        total
    }

    fn grad(&self, theta: &[f64; N_PARAMS]) -> Option<[f64; N_PARAMS]> {
        let [x, y, z, photons, bg] = *theta;
        if photons <= 0.0 || bg < 0.0 {
            return None;
        }
        let baseline = self.camera.baseline();
        let mut g = [0.0; N_PARAMS];
        for ry in 0..self.h {
            for rx in 0..self.w {
                let (ix, iy) = (self.x0 + rx, self.y0 + ry);
                let (cx, cy) = self.grid.center(ix, iy);
                let pg = self.psf.eval_grad(cx - x, cy - y, -z);
                let mean = baseline + bg + photons * pg.value;
                let d = self.camera.dnll_dmean(self.obs[ry * self.w + rx], mean, ix, iy);
                if !d.is_finite() {
                    return None;
                }
                // mean depends on the emitter position through (c - x, -z).
                g[0] += d * photons * (-pg.d_pos[0]);
                g[1] += d * photons * (-pg.d_pos[1]);
                g[2] += d * photons * (-pg.d_pos[2]);
                g[3] += d * pg.value;
                g[4] += d;
            }
        }
        Some(g)
    }

    /// NLL of the saturated model (each pixel's mean set to its observation).
    fn saturated_nll(&self) -> f64 {
        let mut total = 0.0;
        for ry in 0..self.h {
            for rx in 0..self.w {
                let obs = self.obs[ry * self.w + rx];
                let v = self.camera.nll_pixel(obs, obs, self.x0 + rx, self.y0 + ry);
                if v.is_finite() {
                    total += v;
                }
            }
        }
        total
    }

    /// Observed Fisher information: finite differences of the analytic
    /// gradient, symmetrized.
    fn hessian(&self, theta: &[f64; N_PARAMS]) -> Option<[[f64; N_PARAMS]; N_PARAMS]> {
        let steps = [
            0.01 * self.grid.pixel_size,
            0.01 * self.grid.pixel_size,
            0.04 * self.grid.pixel_size,
            (theta[3].abs() * 1e-4).max(1e-3),
            (theta[4].abs() * 1e-4).max(1e-3),
        ];
        let mut h = [[0.0; N_PARAMS]; N_PARAMS];
        for i in 0..N_PARAMS {
            let mut hi = *theta;
            let mut lo = *theta;
            hi[i] += steps[i];
            lo[i] -= steps[i];
            let ghi = self.grad(&hi)?;
            let glo = self.grad(&lo)?;
            for j in 0..N_PARAMS {
                h[i][j] = (ghi[j] - glo[j]) / (2.0 * steps[i]);
            }
        }
        for i in 0..N_PARAMS {
            for j in (i + 1)..N_PARAMS {
                let avg = 0.5 * (h[i][j] + h[j][i]);
                h[i][j] = avg;
                h[j][i] = avg;
            }
        }
        Some(h)
    }
}

/// Lower-triangular Cholesky factor; `None` when not positive definite.
fn cholesky(a: &[[f64; N_PARAMS]; N_PARAMS]) -> Option<[[f64; N_PARAMS]; N_PARAMS]> {
    let mut l = [[0.0; N_PARAMS]; N_PARAMS];
    for i in 0..N_PARAMS {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[[f64; N_PARAMS]; N_PARAMS], b: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut y = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; N_PARAMS];
    for i in (0..N_PARAMS).rev() {
        let mut sum = y[i];
        for k in (i + 1)..N_PARAMS {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

/// Diagonal of the inverse of the Cholesky-factored matrix.
fn chol_inverse_diag(l: &[[f64; N_PARAMS]; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut diag = [0.0; N_PARAMS];
    for col in 0..N_PARAMS {
        let mut e = [0.0; N_PARAMS];
        e[col] = 1.0;
        let x = chol_solve(l, &e);
        diag[col] = x[col];
    }
    diag
}

/// Maximum-likelihood fit of one candidate's ROI.
///
/// Damped Newton on (x, y, z, photons, background) with a finite-difference
/// Hessian of the analytic gradient; Levenberg-style damping grows until a
/// step decreases the objective. Uncertainties come from the diagonal of the
/// inverse observed Fisher information at the optimum.
pub fn fit_roi(
    frame: &[f32],
    grid: &GridSpec,
    candidate: &Candidate,
    psf: &PsfModel,
    camera: &Camera,
    cfg: &FitConfig,
) -> RoiFit {
    let half = cfg.roi_size / 2;
    let x0 = candidate.ix.saturating_sub(half);
    let x1 = (candidate.ix + half + 1).min(grid.width);
    let y0 = candidate.iy.saturating_sub(half);
    let y1 = (candidate.iy + half + 1).min(grid.height);
    let (w, h) = (x1 - x0, y1 - y0);
    let shrunk = w < cfg.roi_size || h < cfg.roi_size;
    let baseline = camera.baseline();

    // Observations, floored just above the Gamma support edge so a stray
    // at-baseline pixel cannot blow up the likelihood.
    let mut obs = Vec::with_capacity(w * h);
    for ry in 0..h {
        for rx in 0..w {
            let v = frame[(y0 + ry) * grid.width + (x0 + rx)] as f64;
            obs.push(v.max(baseline + 1e-3));
        }
    }
    let roi = Roi {
        obs,
        x0,
        y0,
        w,
        h,
        grid,
        psf,
        camera,
    };

    // Initialization: border median as background, intensity-weighted
    // centroid, photons from the excess mass over the PSF footprint.
    let mut border = Vec::new();
    for ry in 0..h {
        for rx in 0..w {
            if ry == 0 || ry == h - 1 || rx == 0 || rx == w - 1 {
                border.push(roi.obs[ry * w + rx] - baseline);
            }
        }
    }
    let bg0 = median(&border).max(0.1);
    let mut wsum = 0.0;
    let mut cx_acc = 0.0;
    let mut cy_acc = 0.0;
    let mut excess = 0.0;
    for ry in 0..h {
        for rx in 0..w {
            let wv = (roi.obs[ry * w + rx] - baseline - bg0).max(0.0);
            let (cx, cy) = grid.center(x0 + rx, y0 + ry);
            wsum += wv;
            cx_acc += wv * cx;
            cy_acc += wv * cy;
            excess += wv;
        }
    }
    let (cand_cx, cand_cy) = grid.center(candidate.ix, candidate.iy);
    let (mut x_init, mut y_init) = if wsum > 0.0 {
        (cx_acc / wsum, cy_acc / wsum)
    } else {
        (cand_cx, cand_cy)
    };
    // Keep the centroid near the candidate pixel; bright neighbors in a
    // shared ROI can drag it away.
    let max_pull = grid.pixel_size * 2.0;
    x_init = x_init.clamp(cand_cx - max_pull, cand_cx + max_pull);
    y_init = y_init.clamp(cand_cy - max_pull, cand_cy + max_pull);

    let mut best: Option<([f64; N_PARAMS], f64)> = None;
    for &z in &cfg.z_init {
        let mut mass = 0.0;
        for ry in 0..h {
            for rx in 0..w {
                let (cx, cy) = grid.center(x0 + rx, y0 + ry);
                mass += psf.eval(cx - x_init, cy - y_init, -z);
            }
        }
        if mass <= 0.0 {
            continue;
        }
        let theta = [x_init, y_init, z, (excess / mass).max(1.0), bg0];
        let f = roi.nll(&theta);
        if f.is_finite() && best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((theta, f));
        }
    }
    let fail = |nll: f64| RoiFit {
        x: cand_cx,
        y: cand_cy,
        z: 0.0,
        photons: 0.0,
        background: bg0,
        sigma: [f64::INFINITY; 3],
        sigma_photons: f64::INFINITY,
        converged: false,
        crowded: false,
        shrunk,
        nll,
        deviance: f64::INFINITY,
        dof: 0,
    };
    let Some((mut theta, mut f)) = best else {
        return fail(f64::INFINITY);
    };

    // Damped Newton iterations.
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let Some(g) = roi.grad(&theta) else { break };
        let Some(hess) = roi.hessian(&theta) else { break };
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = hess;
            for i in 0..N_PARAMS {
                damped[i][i] += lambda * hess[i][i].abs().max(1e-12);
            }
            if let Some(l) = cholesky(&damped) {
                let neg_g = [-g[0], -g[1], -g[2], -g[3], -g[4]];
                let step = chol_solve(&l, &neg_g);
                let mut next = theta;
                for i in 0..N_PARAMS {
                    next[i] += step[i];
                }
                let f_next = roi.nll(&next);
                if f_next.is_finite() && f_next < f {
                    let rel_change = (f - f_next) / (f.abs() + 1.0);
                    theta = next;
                    f = f_next;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    if rel_change < cfg.tol {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            // No decrease at any damping: treat as stationary.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    // Uncertainties from the observed Fisher information.
    let fisher = roi
        .hessian(&theta)
        .and_then(|hess| cholesky(&hess))
        .map(|l| chol_inverse_diag(&l));
    let (sigma, sigma_photons, converged) = match fisher {
        Some(d) => (
            [d[0].max(0.0).sqrt(), d[1].max(0.0).sqrt(), d[2].max(0.0).sqrt()],
            d[3].max(0.0).sqrt(),
            converged,
        ),
        None => ([f64::INFINITY; 3], f64::INFINITY, false),
    };

    let dof = (w * h).saturating_sub(N_PARAMS);
    let deviance = 2.0 * (f - roi.saturated_nll());

    RoiFit {
        x: theta[0],
        y: theta[1],
        z: theta[2],
        photons: theta[3],
        background: theta[4],
        sigma,
        sigma_photons,
        converged,
        crowded: false,
        shrunk,
        nll: f,
        deviance,
        dof,
    }
}

/// Detect and fit every frame of the stack. Converged fits become rows with
/// detection probability 1.0; frames are processed independently and the
/// result does not depend on the thread count.
pub fn localize_stack(
    stack: &FrameStack,
    psf: &PsfModel,
    camera: &Camera,
    det_cfg: &DetectConfig,
    fit_cfg: &FitConfig,
) -> LocalizationTable {
    let grid = stack.grid();
    let per_frame: Vec<Vec<LocRecord>> = (0..stack.n_frames)
        .into_par_iter()
        .map(|t| {
            let frame = stack.frame(t);
            let candidates = detect_candidates(frame, grid.width, grid.height, det_cfg);
            let crowd_limit = (fit_cfg.roi_size as f64 / 2.0) * grid.pixel_size;
            let mut rows = Vec::new();
            for (i, cand) in candidates.iter().enumerate() {
                let mut fit = fit_roi(frame, &grid, cand, psf, camera, fit_cfg);
                let (cx, cy) = grid.center(cand.ix, cand.iy);
                fit.crowded = candidates.iter().enumerate().any(|(j, other)| {
                    if i == j {
                        return false;
                    }
                    let (ox, oy) = grid.center(other.ix, other.iy);
                    ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() < crowd_limit
                });
                let keep = fit.converged
                    && fit.min_significance_ok(fit_cfg.min_photon_significance)
                    && fit.deviance_ok(fit_cfg.max_deviance_sigmas);
                if keep {
                    rows.push(LocRecord {
                        frame: t as u32,
                        x: fit.x,
                        y: fit.y,
                        z: fit.z,
                        photons: fit.photons,
                        prob: 1.0,
                        sig_x: fit.sigma[0],
                        sig_y: fit.sigma[1],
                        sig_z: fit.sigma[2],
                    });
                }
            }
            rows
        })
        .collect();
    per_frame.into_iter().flatten().collect()
}
