//! PSF calibration from bead stacks: images of isolated, immobile emitters
//! recorded at known axial offsets.
//!
//! The fit maximizes the camera-model likelihood jointly over each bead's
//! (x, y), the four PSF shape parameters, one background level, one
//! brightness per (bead, frame), and optionally the pixel-map nodes. The
//! optimizer is deterministic full-batch gradient descent with a diagonal
//! preconditioner and Armijo backtracking, so accepted objective values are
//! non-increasing by construction.

use crate::camera::Camera;
use crate::grid::GridSpec;
use crate::psf::{Parametric, PixelMap3D, PsfModel};
use crate::simulator::FrameStack;
use crate::{CoreError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A frame stack whose frame index maps to a known axial offset
/// `z_k = z0 + k * dz`.
#[derive(Debug, Clone)]
pub struct BeadStack {
    pub stack: FrameStack,
    pub z0: f64,
    pub dz: f64,
    pub camera: Camera,
}

impl BeadStack {
    pub fn validate(&self) -> Result<()> {
        if self.dz == 0.0 {
            return Err(CoreError::InvalidParam("bead stack needs dz != 0".into()));
        }
        if self.stack.n_frames < 3 {
            return Err(CoreError::InvalidParam(
                "bead stack needs at least 3 frames".into(),
            ));
        }
        self.camera.validate()
    }

    pub fn z_at(&self, frame: usize) -> f64 {
        self.z0 + frame as f64 * self.dz
    }
}

/// Bead detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeadDetectConfig {
    /// Threshold as a fraction of the peak of the background-subtracted,
    /// z-summed image.
    pub threshold_rel: f64,
    /// Absolute threshold in summed counts; overrides `threshold_rel` when
    /// set (useful to stay above a known noise ceiling).
    pub threshold_abs: Option<f64>,
    /// Maxima closer than this many pixels are treated as lobes of one bead
    /// and merged into their intensity-weighted centroid.
    pub merge_radius_px: f64,
}

impl Default for BeadDetectConfig {
    fn default() -> Self {
        Self {
            threshold_rel: 0.2,
            threshold_abs: None,
            merge_radius_px: 8.0,
        }
    }
}

/// Rough bead positions: local maxima of the z-summed, median-subtracted
/// image above the relative threshold, refined by an intensity-weighted
/// centroid over a 5x5 window. Returns positions in nm.
pub fn detect_beads(stack: &BeadStack, cfg: &BeadDetectConfig) -> Vec<[f64; 2]> {
    let grid = stack.stack.grid();
    let (w, h) = (grid.width, grid.height);
    let mut summed = vec![0.0f64; w * h];
    for t in 0..stack.stack.n_frames {
        for (acc, &v) in summed.iter_mut().zip(stack.stack.frame(t)) {
            *acc += v as f64;
        }
    }
    let mut sorted = summed.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let sub: Vec<f64> = summed.iter().map(|v| (v - median).max(0.0)).collect();
    let peak = sub.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let threshold = cfg.threshold_abs.unwrap_or(cfg.threshold_rel * peak);

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            f64::NEG_INFINITY
        } else {
            sub[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
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
            if !is_max {
                continue;
            }
            // 5x5 intensity-weighted centroid refinement.
            let mut wsum = 0.0;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let val = at(x + dx, y + dy);
                    if val.is_finite() && val > 0.0 {
                        let (px, py) = grid.center((x + dx) as usize, (y + dy) as usize);
                        wsum += val;
                        cx += val * px;
                        cy += val * py;
                    }
                }
            }
            if wsum > 0.0 {
                out.push(([cx / wsum, cy / wsum], v));
            }
        }
    }

    // Lobed PSFs (double helix) produce several maxima per bead; merge
    // detections within the merge radius into one weighted centroid.
    let merge_radius = cfg.merge_radius_px * grid.pixel_size;
    let mut clusters: Vec<(f64, f64, f64)> = Vec::new(); // (wsum, wx, wy)
    for ([x, y], weight) in out {
        let found = clusters.iter_mut().find(|(wsum, wx, wy)| {
            let (mx, my) = (wx / wsum, wy / wsum);
            ((mx - x).powi(2) + (my - y).powi(2)).sqrt() <= merge_radius
        });
        match found {
            Some((wsum, wx, wy)) => {
                *wsum += weight;
                *wx += weight * x;
                *wy += weight * y;
            }
            None => clusters.push((weight, weight * x, weight * y)),
        }
    }
    clusters
        .into_iter()
        .map(|(wsum, wx, wy)| [wx / wsum, wy / wsum])
        .collect()
}

/// Optimizer settings for [`fit_psf`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Relative objective-change tolerance.
    pub tol: f64,
    /// Square fit window per bead, in pixels.
    pub window: usize,
    pub fit_pixmap: bool,
    /// L2 regularization weight on pixel-map nodes.
    pub pixmap_l2: f64,
    pub detect: BeadDetectConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-8,
            window: 13,
            fit_pixmap: false,
            pixmap_l2: 1e-3,
            detect: BeadDetectConfig::default(),
        }
    }
}

/// Result of a bead-stack fit.
#[derive(Debug, Clone)]
pub struct BeadFitResult {
    pub bead_xy: Vec<[f64; 2]>,
    pub parametric: Parametric,
    pub pixmap: Option<PixelMap3D>,
    /// Per-bead, per-frame fitted brightness.
    pub brightness: Vec<Vec<f64>>,
    pub background: f64,
    /// Accepted objective values, non-increasing.
    pub trace: Vec<f64>,
    pub final_nll: f64,
    pub converged: bool,
    pub iterations: usize,
    /// RMS residual (counts) per bead over its window and all frames.
    pub per_bead_rms: Vec<f64>,
}

/// Parameter vector layout: bead xy pairs, 4 shape parameters, background,
/// per-(bead, frame) brightness, then optional pixmap nodes.
struct Layout {
    n_beads: usize,
    n_frames: usize,
    n_pixmap: usize,
}

impl Layout {
    fn xy(&self, bead: usize) -> usize {
        2 * bead
    }
    fn shape(&self) -> usize {
        2 * self.n_beads
    }
    fn background(&self) -> usize {
        self.shape() + 4
    }
    fn brightness(&self, bead: usize, frame: usize) -> usize {
        self.background() + 1 + bead * self.n_frames + frame
    }
    fn pixmap(&self) -> usize {
        self.background() + 1 + self.n_beads * self.n_frames
    }
    fn len(&self) -> usize {
        self.pixmap() + self.n_pixmap
    }
}

struct Problem<'a> {
    stack: &'a BeadStack,
    grid: GridSpec,
    windows: Vec<(usize, usize)>,
    window: usize,
    kind: Parametric,
    layout: Layout,
    l2: f64,
    fit_pixmap: bool,
    pixmap_template: Option<PixelMap3D>,
}

impl Problem<'_> {
    fn model(&self, params: &[f64]) -> (Parametric, Option<PixelMap3D>) {
        let s = self.layout.shape();
        let parametric = self
            .kind
            .with_params([params[s], params[s + 1], params[s + 2], params[s + 3]]);
        let pixmap = self.pixmap_template.as_ref().map(|t| {
            let mut map = t.clone();
            if self.fit_pixmap {
                let off = self.layout.pixmap();
                map.values
                    .copy_from_slice(&params[off..off + self.layout.n_pixmap]);
            }
            map
        });
        (parametric, pixmap)
    }

    /// Objective and gradient. Non-finite objective marks an invalid point.
    fn eval(&self, params: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let (parametric, pixmap) = self.model(params);
        let model = PsfModel {
            parametric,
            pixmap,
        };
        let bl = self.stack.camera.baseline();
        let bg = params[self.layout.background()];
        if bg < 0.0 {
            return (f64::INFINITY, None);
        }

        // Parallel over (bead, frame) tiles; per-tile gradients merge after.
        let jobs: Vec<(usize, usize)> = (0..self.layout.n_beads)
            .flat_map(|b| (0..self.layout.n_frames).map(move |t| (b, t)))
            .collect();
        let results: Vec<(f64, Option<Vec<(usize, f64)>>)> = jobs
            .par_iter()
            .map(|&(b, t)| self.eval_tile(params, &model, bl, bg, b, t, want_grad))
            .collect();

        let mut total = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; self.layout.len()]);
        for (f, g) in results {
            if !f.is_finite() {
                return (f64::INFINITY, None);
            }
            total += f;
            if let (Some(acc), Some(partial)) = (grad.as_mut(), g) {
                for (idx, v) in partial {
                    acc[idx] += v;
                }
            }
        }
        if self.fit_pixmap {
            let off = self.layout.pixmap();
            let nodes = &params[off..off + self.layout.n_pixmap];
            total += self.l2 * nodes.iter().map(|v| v * v).sum::<f64>();
            if let Some(acc) = grad.as_mut() {
                for (i, v) in nodes.iter().enumerate() {
                    acc[off + i] += 2.0 * self.l2 * v;
                }
            }
        }
        (total, grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_tile(
        &self,
        params: &[f64],
        model: &PsfModel,
        bl: f64,
        bg: f64,
        b: usize,
        t: usize,
        want_grad: bool,
    ) -> (f64, Option<Vec<(usize, f64)>>) {
        let (wx, wy) = self.windows[b];
        let x = params[self.layout.xy(b)];
        let y = params[self.layout.xy(b) + 1];
        let alpha = params[self.layout.brightness(b, t)];
        if alpha < 0.0 {
            return (f64::INFINITY, None);
        }
        let z = self.stack.z_at(t);
        let frame = self.stack.frame_obs(t);
        let mut f = 0.0;
        let mut grad = want_grad.then(Vec::new);
        for ry in 0..self.window {
            for rx in 0..self.window {
                let (ix, iy) = (wx + rx, wy + ry);
                let (cx, cy) = self.grid.center(ix, iy);
                let pg = model.eval_grad(cx - x, cy - y, -z);
                let mean = bl + bg + alpha * pg.value;
                let obs = frame[iy * self.grid.width + ix];
                let nll = self.stack.camera.nll_pixel(obs, mean, ix, iy);
                if !nll.is_finite() {
                    return (f64::INFINITY, None);
                }
                f += nll;
                let Some(g) = grad.as_mut() else { continue };
                let d = self.stack.camera.dnll_dmean(obs, mean, ix, iy);
                g.push((self.layout.xy(b), d * alpha * -pg.d_pos[0]));
                g.push((self.layout.xy(b) + 1, d * alpha * -pg.d_pos[1]));
                g.push((self.layout.brightness(b, t), d * pg.value));
                g.push((self.layout.background(), d));
                let s = self.layout.shape();
                for i in 0..4 {
                    g.push((s + i, d * alpha * pg.d_params[i]));
                }
                if self.fit_pixmap {
                    if let Some(weights) = pg.pixmap_weights {
                        let off = self.layout.pixmap();
                        for (node, wgt) in weights {
                            g.push((off + node, d * alpha * wgt));
                        }
                    }
                }
            }
        }
        (f, grad)
    }
}

impl BeadStack {
    /// Observations of frame `t`, floored just above the Gamma support.
    fn frame_obs(&self, t: usize) -> Vec<f64> {
        let bl = self.camera.baseline();
        self.stack
            .frame(t)
            .iter()
            .map(|&v| (v as f64).max(bl + 1e-3))
            .collect()
    }
}

/// Kind-specific scale floors for the diagonal preconditioner.
fn shape_scales(kind: &Parametric) -> [f64; 4] {
    match kind {
        Parametric::TwoD(_) => [0.5, 0.5, 1e-5, 1e-5],
        Parametric::As(_) => [1.0, 100.0, 100.0, 1e4],
        Parametric::Dh(_) => [1e-4, 1e-3, 0.1, 100.0],
    }
}

/// Fit the PSF model to a bead stack by maximum likelihood.
pub fn fit_psf(stack: &BeadStack, init: &PsfModel, opts: &FitOptions) -> Result<BeadFitResult> {
    stack.validate()?;
    init.parametric.validate()?;
    let grid = stack.stack.grid();
    let beads = detect_beads(stack, &opts.detect);
    if beads.is_empty() {
        return Err(CoreError::Degenerate("no beads detected".into()));
    }
    let window = opts.window.min(grid.width).min(grid.height);
    let half = window / 2;

    // Window corners, clamped inside the field.
    let windows: Vec<(usize, usize)> = beads
        .iter()
        .map(|&[x, y]| {
            let (ix, iy) = grid.containing_pixel(x, y);
            let wx = ix.saturating_sub(half).min(grid.width - window);
            let wy = iy.saturating_sub(half).min(grid.height - window);
            (wx, wy)
        })
        .collect();
    for i in 0..windows.len() {
        for j in (i + 1)..windows.len() {
            let (ax, ay) = windows[i];
            let (bx, by) = windows[j];
            let overlap_x = ax < bx + window && bx < ax + window;
            let overlap_y = ay < by + window && by < ay + window;
            if overlap_x && overlap_y {
                return Err(CoreError::InvalidParam(format!(
                    "fit windows of beads {i} and {j} overlap"
                )));
            }
        }
    }

    let n_frames = stack.stack.n_frames;
    let pixmap_template = if opts.fit_pixmap {
        Some(
            init.pixmap
                .clone()
                .unwrap_or_else(|| PixelMap3D::zeroed_default(grid.pixel_size)),
        )
    } else {
        init.pixmap.clone()
    };
    let n_pixmap = if opts.fit_pixmap {
        pixmap_template.as_ref().map_or(0, |m| m.values.len())
    } else {
        0
    };
    let layout = Layout {
        n_beads: beads.len(),
        n_frames,
        n_pixmap,
    };
    let problem = Problem {
        stack,
        grid,
        windows,
        window,
        kind: init.parametric,
        layout,
        l2: opts.pixmap_l2,
        fit_pixmap: opts.fit_pixmap,
        pixmap_template,
    };
    let layout = &problem.layout;

    // Initial parameters and preconditioner scales.
    let mut params = vec![0.0; layout.len()];
    let mut scales = vec![1.0; layout.len()];
    for (b, &[x, y]) in beads.iter().enumerate() {
        params[layout.xy(b)] = x;
        params[layout.xy(b) + 1] = y;
        scales[layout.xy(b)] = grid.pixel_size;
        scales[layout.xy(b) + 1] = grid.pixel_size;
    }
    let init_shape = init.parametric.params();
    let floors = shape_scales(&init.parametric);
    for i in 0..4 {
        params[layout.shape() + i] = init_shape[i];
        scales[layout.shape() + i] = init_shape[i].abs().max(floors[i]);
    }
    let bl = stack.camera.baseline();
    let mut all: Vec<f64> = (0..n_frames)
        .flat_map(|t| stack.stack.frame(t).iter().map(|&v| v as f64))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let bg0 = (all[all.len() / 2] - bl).max(0.1);
    params[layout.background()] = bg0;
    scales[layout.background()] = bg0.max(1.0);
    for (b, &(wx, wy)) in problem.windows.iter().enumerate() {
        for t in 0..n_frames {
            let frame = stack.stack.frame(t);
            let mut excess = 0.0;
            let mut mass = 0.0;
            for ry in 0..window {
                for rx in 0..window {
                    let (cx, cy) = grid.center(wx + rx, wy + ry);
                    excess +=
                        (frame[(wy + ry) * grid.width + (wx + rx)] as f64 - bl - bg0).max(0.0);
                    mass += init.eval(cx - beads[b][0], cy - beads[b][1], -stack.z_at(t));
                }
            }
            let a0 = if mass > 1e-9 { excess / mass } else { excess };
            let idx = layout.brightness(b, t);
            params[idx] = a0.max(1.0);
            scales[idx] = params[idx].max(1.0);
        }
    }
    if opts.fit_pixmap {
        let off = layout.pixmap();
        if let Some(t) = problem.pixmap_template.as_ref() {
            params[off..off + n_pixmap].copy_from_slice(&t.values);
        }
        for s in &mut scales[off..off + n_pixmap] {
            *s = 0.05;
        }
    }

    // Preconditioned gradient descent with Armijo backtracking.
    let (mut f, mut grad) = problem.eval(&params, true);
    if !f.is_finite() {
        return Err(CoreError::Degenerate(
            "initial calibration point is outside the camera model domain".into(),
        ));
    }
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let g = grad.as_ref().expect("gradient at finite point");
        let dir: Vec<f64> = g
            .iter()
            .zip(&scales)
            .map(|(gi, si)| -gi * si * si)
            .collect();
        let slope: f64 = g.iter().zip(&dir).map(|(gi, di)| gi * di).sum();
        if slope >= 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut alpha = step;
        for _ in 0..40 {
            let trial: Vec<f64> = params
                .iter()
                .zip(&dir)
                .map(|(p, d)| p + alpha * d)
                .collect();
            let (f_trial, g_trial) = problem.eval(&trial, true);
            if f_trial.is_finite() && f_trial <= f + 1e-4 * alpha * slope {
                let rel = (f - f_trial) / (f.abs() + 1.0);
                params = trial;
                f = f_trial;
                grad = g_trial;
                trace.push(f);
                step = (alpha * 2.0).min(1.0);
                accepted = true;
                if rel < opts.tol {
                    converged = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // Objective cannot be decreased along the scaled gradient.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let (parametric, pixmap) = problem.model(&params);
    let model = PsfModel {
        parametric,
        pixmap: pixmap.clone(),
    };

    // Per-bead RMS residuals at the optimum.
    let bg = params[layout.background()];
    let per_bead_rms: Vec<f64> = (0..layout.n_beads)
        .map(|b| {
            let (wx, wy) = problem.windows[b];
            let x = params[layout.xy(b)];
            let y = params[layout.xy(b) + 1];
            let mut sum2 = 0.0;
            let mut n = 0usize;
            for t in 0..n_frames {
                let alpha = params[layout.brightness(b, t)];
                let frame = stack.stack.frame(t);
                for ry in 0..window {
                    for rx in 0..window {
                        let (cx, cy) = grid.center(wx + rx, wy + ry);
                        let mean =
                            bl + bg + alpha * model.eval(cx - x, cy - y, -stack.z_at(t));
                        let obs = frame[(wy + ry) * grid.width + (wx + rx)] as f64;
                        sum2 += (obs - mean).powi(2);
                        n += 1;
                    }
                }
            }
            (sum2 / n as f64).sqrt()
        })
        .collect();

    Ok(BeadFitResult {
        bead_xy: (0..layout.n_beads)
            .map(|b| [params[layout.xy(b)], params[layout.xy(b) + 1]])
            .collect(),
        parametric,
        pixmap,
        brightness: (0..layout.n_beads)
            .map(|b| {
                (0..n_frames)
                    .map(|t| params[layout.brightness(b, t)])
                    .collect()
            })
            .collect(),
        background: bg,
        final_nll: f,
        trace,
        converged,
        iterations,
        per_bead_rms,
    })
}

/// Negative log-likelihood of a bead stack under explicit parameters; the
/// building block `fit_psf` optimizes. Exposed for direct evaluation and for
/// gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn bead_negloglik(
    stack: &BeadStack,
    bead_xy: &[[f64; 2]],
    parametric: &Parametric,
    pixmap: Option<&PixelMap3D>,
    brightness: &[Vec<f64>],
    background: f64,
    window: usize,
) -> Result<f64> {
    stack.validate()?;
    let grid = stack.stack.grid();
    let window = window.min(grid.width).min(grid.height);
    let half = window / 2;
    let windows: Vec<(usize, usize)> = bead_xy
        .iter()
        .map(|&[x, y]| {
            let (ix, iy) = grid.containing_pixel(x, y);
            (
                ix.saturating_sub(half).min(grid.width - window),
                iy.saturating_sub(half).min(grid.height - window),
            )
        })
        .collect();
    let model = PsfModel {
        parametric: *parametric,
        pixmap: pixmap.cloned(),
    };
    let bl = stack.camera.baseline();
    let mut total = 0.0;
    for (b, &(wx, wy)) in windows.iter().enumerate() {
        for t in 0..stack.stack.n_frames {
            let frame = stack.frame_obs(t);
            let alpha = brightness[b][t];
            for ry in 0..window {
                for rx in 0..window {
                    let (ix, iy) = (wx + rx, wy + ry);
                    let (cx, cy) = grid.center(ix, iy);
                    let mean = bl
                        + background
                        + alpha * model.eval(cx - bead_xy[b][0], cy - bead_xy[b][1], -stack.z_at(t));
                    let nll = stack
                        .camera
                        .nll_pixel(frame[iy * grid.width + ix], mean, ix, iy);
                    if !nll.is_finite() {
                        return Err(CoreError::Degenerate(format!(
                            "mean outside camera domain at bead {b}, frame {t}"
                        )));
                    }
                    total += nll;
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraEmccd;
    use crate::psf::PsfAsParams;
    use crate::simulator::EmitterTrack;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn as_params() -> Parametric {
        Parametric::As(PsfAsParams {
            a: 3.0,
            b_x: 250.0,
            b_y: -250.0,
            c: 4.0e4,
        })
    }

    fn emccd() -> Camera {
        Camera::Emccd(CameraEmccd {
            baseline: 100.0,
            em_gain: 300.0,
            e_per_count: 45.0,
            background: 20.0,
        })
    }

    /// Simulate a bead stack with the given beads and per-frame brightness.
    pub(crate) fn simulate_bead_stack(
        beads: &[[f64; 2]],
        brightness: f64,
        parametric: Parametric,
        width: usize,
        height: usize,
        seed: u64,
    ) -> BeadStack {
        let camera = emccd();
        let psf = PsfModel::parametric(parametric);
        let grid = GridSpec::new(width, height, 100.0);
        let n_frames = 13;
        let z0 = -600.0;
        let dz = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for t in 0..n_frames {
            let tracks: Vec<EmitterTrack> = beads
                .iter()
                .enumerate()
                .map(|(i, &[x, y])| EmitterTrack {
                    id: i as u64,
                    t_start: t as u32,
                    t_end: t as u32,
                    positions: vec![[x, y, z0 + t as f64 * dz]],
                    photons: vec![brightness],
                })
                .collect();
            let mut mean =
                crate::simulator::mean_frame(&tracks, t as u32, &psf, 20.0, &grid);
            for v in &mut mean.data {
                *v += 100.0;
            }
            data.extend(camera.sample_frame(&mean, &mut rng).unwrap());
        }
        BeadStack {
            stack: FrameStack {
                width,
                height,
                n_frames,
                pixel_size: 100.0,
                data,
            },
            z0,
            dz,
            camera,
        }
    }

    #[test]
    fn detects_single_bead_near_truth() {
        let stack = simulate_bead_stack(&[[1150.0, 1250.0]], 20000.0, as_params(), 24, 24, 1);
        let found = detect_beads(&stack, &BeadDetectConfig::default());
        assert_eq!(found.len(), 1, "{found:?}");
        assert!((found[0][0] - 1150.0).abs() < 50.0);
        assert!((found[0][1] - 1250.0).abs() < 50.0);
    }

    #[test]
    fn blank_stack_detects_nothing_above_noise() {
        let camera = emccd();
        let grid = GridSpec::new(16, 16, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..5 {
            let mut mean = crate::grid::Image::zeros(16, 16);
            for v in &mut mean.data {
                *v = 120.0;
            }
            data.extend(camera.sample_frame(&mean, &mut rng).unwrap());
        }
        let stack = BeadStack {
            stack: FrameStack {
                width: 16,
                height: 16,
                n_frames: 5,
                pixel_size: 100.0,
                data,
            },
            z0: -200.0,
            dz: 100.0,
            camera,
        };
        // Summed noise sd is ~35 counts; 500 is far above the noise ceiling.
        let found = detect_beads(
            &stack,
            &BeadDetectConfig {
                threshold_abs: Some(500.0),
                ..Default::default()
            },
        );
        assert!(found.is_empty(), "{found:?}");
        let _ = grid;
    }

    #[test]
    fn detects_two_separated_beads() {
        let stack = simulate_bead_stack(
            &[[800.0, 900.0], [1800.0, 1900.0]],
            20000.0,
            as_params(),
            28,
            28,
            4,
        );
        let mut found = detect_beads(&stack, &BeadDetectConfig::default());
        found.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(found.len(), 2, "{found:?}");
        assert!((found[0][0] - 800.0).abs() < 50.0);
        assert!((found[1][0] - 1800.0).abs() < 50.0);
    }

    #[test]
    fn negloglik_prefers_generating_parameters() {
        let truth = [[1150.0, 1250.0]];
        let stack = simulate_bead_stack(&truth, 20000.0, as_params(), 24, 24, 5);
        let brightness = vec![vec![20000.0; 13]];
        let base = bead_negloglik(
            &stack,
            &truth,
            &as_params(),
            None,
            &brightness,
            20.0,
            13,
        )
        .unwrap();
        assert!(base.is_finite());
        // Perturbing any single shape parameter by +10% worsens the fit.
        let p = as_params().params();
        for i in 0..4 {
            let mut q = p;
            q[i] *= 1.1;
            let worse = bead_negloglik(
                &stack,
                &truth,
                &as_params().with_params(q),
                None,
                &brightness,
                20.0,
                13,
            )
            .unwrap();
            assert!(worse > base, "param {i}: {worse} vs {base}");
        }
        // Two identical beads in disjoint windows give twice the objective.
        let two = [[800.0, 900.0], [1800.0, 1900.0]];
        let stack2 = simulate_bead_stack(&two, 20000.0, as_params(), 28, 28, 6);
        let bright2 = vec![vec![20000.0; 13]; 2];
        let both = bead_negloglik(&stack2, &two, &as_params(), None, &bright2, 20.0, 13).unwrap();
        let first =
            bead_negloglik(&stack2, &two[..1], &as_params(), None, &bright2[..1], 20.0, 13)
                .unwrap();
        let second =
            bead_negloglik(&stack2, &two[1..], &as_params(), None, &bright2[1..], 20.0, 13)
                .unwrap();
        assert!((both - first - second).abs() < 1e-6 * both.abs());
    }

    #[test]
    fn fit_recovers_bead_position_and_shape() {
        let truth_xy = [[1150.0, 1250.0]];
        let stack = simulate_bead_stack(&truth_xy, 20000.0, as_params(), 24, 24, 7);
        // Init with shape parameters off by ~10%.
        let init = PsfModel::parametric(Parametric::As(PsfAsParams {
            a: 3.3,
            b_x: 220.0,
            b_y: -280.0,
            c: 3.6e4,
        }));
        let result = fit_psf(&stack, &init, &FitOptions::default()).unwrap();
        assert!(result.converged, "iterations {}", result.iterations);
        let [x, y] = result.bead_xy[0];
        assert!(
            (x - 1150.0).abs() < 1.0 && (y - 1250.0).abs() < 1.0,
            "bead at ({x}, {y})"
        );
        let got = result.parametric.params();
        let expect = as_params().params();
        for i in 0..4 {
            let rel = (got[i] - expect[i]).abs() / expect[i].abs();
            assert!(rel < 0.02, "shape {i}: {} vs {} ({rel})", got[i], expect[i]);
        }
        // Objective trace is non-increasing.
        for w in result.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn fit_from_truth_converges_immediately_without_worsening() {
        let truth_xy = [[1150.0, 1250.0]];
        let stack = simulate_bead_stack(&truth_xy, 20000.0, as_params(), 24, 24, 8);
        let init = PsfModel::parametric(as_params());
        let result = fit_psf(&stack, &init, &FitOptions::default()).unwrap();
        assert!(result.converged);
        assert!(result.final_nll <= result.trace[0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let truth_xy = [[1150.0, 1250.0]];
        let stack = simulate_bead_stack(&truth_xy, 8000.0, as_params(), 24, 24, 9);
        let opts = FitOptions::default();
        let beads = detect_beads(&stack, &opts.detect);
        let layout = Layout {
            n_beads: 1,
            n_frames: 13,
            n_pixmap: 0,
        };
        let problem = Problem {
            stack: &stack,
            grid: stack.stack.grid(),
            windows: vec![(
                stack.stack.grid().containing_pixel(beads[0][0], beads[0][1]).0 - 6,
                stack.stack.grid().containing_pixel(beads[0][0], beads[0][1]).1 - 6,
            )],
            window: 13,
            kind: as_params(),
            layout,
            l2: 0.0,
            fit_pixmap: false,
            pixmap_template: None,
        };
        let mut params = vec![0.0; problem.layout.len()];
        params[0] = beads[0][0];
        params[1] = beads[0][1];
        let shape = as_params().params();
        params[2..6].copy_from_slice(&shape);
        params[problem.layout.background()] = 18.0;
        for t in 0..13 {
            params[problem.layout.brightness(0, t)] = 7500.0 + 50.0 * t as f64;
        }
        let (f0, grad) = problem.eval(&params, true);
        assert!(f0.is_finite());
        let grad = grad.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        for _ in 0..10 {
            let i = rng.random_range(0..params.len());
            let h = params[i].abs().max(1e-2) * 1e-5;
            let mut hi = params.clone();
            hi[i] += h;
            let mut lo = params.clone();
            lo[i] -= h;
            let (fh, _) = problem.eval(&hi, false);
            let (fl, _) = problem.eval(&lo, false);
            let fd = (fh - fl) / (2.0 * h);
            let atol = (fh.abs() + fl.abs()).max(1.0) / h * 1e-12;
            if (fd - grad[i]).abs() <= atol {
                continue;
            }
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel < 1e-4, "param {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn overlapping_windows_are_rejected() {
        // 10 px apart: detected separately, but 13 px windows collide.
        let stack = simulate_bead_stack(
            &[[1000.0, 1000.0], [2000.0, 1000.0]],
            20000.0,
            as_params(),
            24,
            24,
            11,
        );
        let init = PsfModel::parametric(as_params());
        let err = fit_psf(&stack, &init, &FitOptions::default());
        assert!(err.is_err());
    }
}
