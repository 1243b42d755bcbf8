//! Probabilistic training objectives over per-pixel output maps, implemented
//! as pure functions with analytic gradients.
//!
//! One frame of output maps carries nine channels per pixel: a detection
//! probability `p`, a brightness `alpha`, in-pixel offsets `dx, dy` plus an
//! absolute `dz` (all nm), and the four uncertainties `sig_alpha, sig_x,
//! sig_y, sig_z`. The pixels act as components of a Gaussian mixture over
//! emitter locations with mixture weights `p_k / sum(p)`; the emitter count
//! is scored by a Gaussian surrogate of its Poisson-binomial distribution.
//!
//! Every objective has a `_grad` companion returning the derivative with
//! respect to each map entry; the tests (and the acceptance suite) hold these
//! to central finite differences at 1e-4 relative error.

use crate::grid::GridSpec;
use crate::{CoreError, Result};

/// Floor added to uncertainty outputs before use, in units of the pixel
/// pitch for the spatial sigmas and absolute for `sig_alpha`.
pub const SIGMA_FLOOR_NORM: f64 = 0.01;

/// Variance floor of the Gaussian count surrogate, reached when all `p` are
/// saturated at 0 or 1.
pub const COUNT_VAR_FLOOR: f64 = 1e-6;

/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` inside the binary
/// cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Per-pixel output maps of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps {
    pub grid: GridSpec,
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
    pub sig_alpha: Vec<f64>,
    pub sig_x: Vec<f64>,
    pub sig_y: Vec<f64>,
    pub sig_z: Vec<f64>,
}

impl OutputMaps {
    /// All-zero maps on the given grid.
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.n_pixels();
        Self {
            grid,
            p: vec![0.0; n],
            alpha: vec![0.0; n],
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            dz: vec![0.0; n],
            sig_alpha: vec![0.0; n],
            sig_x: vec![0.0; n],
            sig_y: vec![0.0; n],
            sig_z: vec![0.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_pixels();
        let lens = [
            self.p.len(),
            self.alpha.len(),
            self.dx.len(),
            self.dy.len(),
            self.dz.len(),
            self.sig_alpha.len(),
            self.sig_x.len(),
            self.sig_y.len(),
            self.sig_z.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(CoreError::DimMismatch(format!(
                "maps channels must have {n} entries, got {lens:?}"
            )));
        }
        if self.p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::InvalidParam("p map outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Mixture mean of pixel `k` in nm: pixel center plus offsets, `z = dz`.
    pub fn mu(&self, k: usize) -> [f64; 3] {
        let (ix, iy) = (k % self.grid.width, k / self.grid.width);
        let (cx, cy) = self.grid.center(ix, iy);
        [cx + self.dx[k], cy + self.dy[k], self.dz[k]]
    }

    /// Effective spatial sigmas of pixel `k`: raw outputs plus the floor.
    pub fn sigma(&self, k: usize) -> [f64; 3] {
        let floor = SIGMA_FLOOR_NORM * self.grid.pixel_size;
        [
            self.sig_x[k] + floor,
            self.sig_y[k] + floor,
            self.sig_z[k] + floor,
        ]
    }

    fn sigma_alpha(&self, k: usize) -> f64 {
        self.sig_alpha[k] + SIGMA_FLOOR_NORM
    }
}

/// Per-entry derivatives with the same layout as [`OutputMaps`].
#[derive(Debug, Clone, PartialEq)]
pub struct MapsGrad {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
    pub sig_alpha: Vec<f64>,
    pub sig_x: Vec<f64>,
    pub sig_y: Vec<f64>,
    pub sig_z: Vec<f64>,
}

impl MapsGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            alpha: vec![0.0; n],
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            dz: vec![0.0; n],
            sig_alpha: vec![0.0; n],
            sig_x: vec![0.0; n],
            sig_y: vec![0.0; n],
            sig_z: vec![0.0; n],
        }
    }
}

/// Ground-truth emitters of one frame: locations (nm), brightness and the
/// per-pixel emitter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub positions: Vec<[f64; 3]>,
    pub brightness: Vec<f64>,
    /// Number of emitters whose containing pixel is `k`.
    pub indicators: Vec<u32>,
}

impl GroundTruthSet {
    pub fn from_positions(grid: &GridSpec, positions: Vec<[f64; 3]>, brightness: Vec<f64>) -> Self {
        let mut indicators = vec![0u32; grid.n_pixels()];
        for pos in &positions {
            let (ix, iy) = grid.containing_pixel(pos[0], pos[1]);
            indicators[grid.index(ix, iy)] += 1;
        }
        Self {
            positions,
            brightness,
            indicators,
        }
    }

    /// True emitter count.
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Options for the mixture likelihood.
#[derive(Debug, Clone, Copy, Default)]
pub struct GmmOptions {
    /// Include the brightness dimension (alpha, sig_alpha) in the mixture
    /// Gaussians, making them 4D.
    pub include_brightness: bool,
}

fn log_normal_1d(x: f64, mu: f64, sigma: f64) -> f64 {
    let u = (x - mu) / sigma;
    -0.5 * u * u - sigma.ln() - 0.5 * LN_2PI
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-likelihood of the ground-truth locations under the pixel mixture:
/// `sum_i log sum_k (p_k / sum p) N(X_i | mu_k, Sigma_k)`.
///
/// Empty truth contributes 0. All-zero `p` with nonempty truth is degenerate
/// and reported as an error.
pub fn gmm_loglik(maps: &OutputMaps, truth: &GroundTruthSet, opts: GmmOptions) -> Result<f64> {
    Ok(gmm_internal(maps, truth, opts, false)?.0)
}

/// [`gmm_loglik`] plus its gradient with respect to every map entry.
pub fn gmm_loglik_grad(
    maps: &OutputMaps,
    truth: &GroundTruthSet,
    opts: GmmOptions,
) -> Result<(f64, MapsGrad)> {
    let (value, grad) = gmm_internal(maps, truth, opts, true)?;
    Ok((value, grad.expect("gradient requested")))
}

fn gmm_internal(
    maps: &OutputMaps,
    truth: &GroundTruthSet,
    opts: GmmOptions,
    want_grad: bool,
) -> Result<(f64, Option<MapsGrad>)> {
    maps.validate()?;
    let n = maps.p.len();
    let mut grad = want_grad.then(|| MapsGrad::zeros(n));
    if truth.positions.is_empty() {
        return Ok((0.0, grad));
    }
    let p_sum: f64 = maps.p.iter().sum();
    if p_sum <= 0.0 {
        return Err(CoreError::Degenerate(
            "all detection probabilities are zero with nonempty truth".into(),
        ));
    }
    let ln_p_sum = p_sum.ln();

    let mus: Vec<[f64; 3]> = (0..n).map(|k| maps.mu(k)).collect();
    let sigmas: Vec<[f64; 3]> = (0..n).map(|k| maps.sigma(k)).collect();

    let mut total = 0.0;
    let mut log_phi = vec![0.0; n];
    let mut log_terms = vec![0.0; n];
    for (i, x) in truth.positions.iter().enumerate() {
        for k in 0..n {
            let mut lp = log_normal_1d(x[0], mus[k][0], sigmas[k][0])
                + log_normal_1d(x[1], mus[k][1], sigmas[k][1])
                + log_normal_1d(x[2], mus[k][2], sigmas[k][2]);
            if opts.include_brightness {
                lp += log_normal_1d(truth.brightness[i], maps.alpha[k], maps.sigma_alpha(k));
            }
            log_phi[k] = lp;
            log_terms[k] = if maps.p[k] > 0.0 {
                maps.p[k].ln() - ln_p_sum + lp
            } else {
                f64::NEG_INFINITY
            };
        }
        let log_s = logsumexp(&log_terms);
        total += log_s;

        let Some(g) = grad.as_mut() else { continue };
        for k in 0..n {
            // t = phi_ik / S_i where S_i is the mixture density of emitter i;
            // the responsibility of pixel k is r = p_k t / P.
            let t = (log_phi[k] - log_s).exp();
            g.p[k] += (t - 1.0) / p_sum;
            let r = maps.p[k] * t / p_sum;
            if r == 0.0 {
                continue;
            }
            let spatial = [
                (x[0], mus[k][0], sigmas[k][0]),
                (x[1], mus[k][1], sigmas[k][1]),
                (x[2], mus[k][2], sigmas[k][2]),
            ];
            for (ax, (xv, mu, sigma)) in spatial.into_iter().enumerate() {
                let u = (xv - mu) / sigma;
                let d_mu = r * u / sigma;
                let d_sigma = r * (u * u - 1.0) / sigma;
                match ax {
                    0 => {
                        g.dx[k] += d_mu;
                        g.sig_x[k] += d_sigma;
                    }
                    1 => {
                        g.dy[k] += d_mu;
                        g.sig_y[k] += d_sigma;
                    }
                    _ => {
                        g.dz[k] += d_mu;
                        g.sig_z[k] += d_sigma;
                    }
                }
            }
            if opts.include_brightness {
                let sa = maps.sigma_alpha(k);
                let u = (truth.brightness[i] - maps.alpha[k]) / sa;
                g.alpha[k] += r * u / sa;
                g.sig_alpha[k] += r * (u * u - 1.0) / sa;
            }
        }
    }

    Ok((total, grad))
}

/// Result of the Gaussian count surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountLoglik {
    pub value: f64,
    /// True when the Poisson-binomial variance fell below [`COUNT_VAR_FLOOR`]
    /// and was clamped.
    pub degenerate: bool,
}

/// Gaussian surrogate of the count likelihood:
/// `log N(S | sum p, sum p(1-p))`, variance floored at [`COUNT_VAR_FLOOR`].
pub fn count_loglik(p: &[f64], true_count: f64) -> CountLoglik {
    count_internal(p, true_count).0
}

/// [`count_loglik`] plus its gradient with respect to the `p` entries.
pub fn count_loglik_grad(p: &[f64], true_count: f64) -> (CountLoglik, Vec<f64>) {
    let (out, mean, var, clamped) = count_internal(p, true_count);
    let d_mean = (true_count - mean) / var;
    let d_var = if clamped {
        0.0
    } else {
        -0.5 / var + (true_count - mean).powi(2) / (2.0 * var * var)
    };
    let grad = p
        .iter()
        .map(|&pk| d_mean + d_var * (1.0 - 2.0 * pk))
        .collect();
    (out, grad)
}

fn count_internal(p: &[f64], true_count: f64) -> (CountLoglik, f64, f64, bool) {
    let mean: f64 = p.iter().sum();
    let var_raw: f64 = p.iter().map(|&pk| pk - pk * pk).sum();
    let clamped = var_raw < COUNT_VAR_FLOOR;
    let var = var_raw.max(COUNT_VAR_FLOOR);
    let value = -0.5 * LN_2PI - 0.5 * var.ln() - (true_count - mean).powi(2) / (2.0 * var);
    (
        CountLoglik {
            value,
            degenerate: clamped,
        },
        mean,
        var,
        clamped,
    )
}

/// Total localization log-likelihood: the mixture term plus the count term
/// weighted by the true emitter count.
pub fn total_loglik(maps: &OutputMaps, truth: &GroundTruthSet, opts: GmmOptions) -> Result<f64> {
    let s = truth.count() as f64;
    let gmm = gmm_loglik(maps, truth, opts)?;
    Ok(gmm + s * count_loglik(&maps.p, s).value)
}

/// [`total_loglik`] plus its gradient with respect to every map entry.
pub fn total_loglik_grad(
    maps: &OutputMaps,
    truth: &GroundTruthSet,
    opts: GmmOptions,
) -> Result<(f64, MapsGrad)> {
    let s = truth.count() as f64;
    let (gmm, mut grad) = gmm_loglik_grad(maps, truth, opts)?;
    let (count, count_grad) = count_loglik_grad(&maps.p, s);
    for (gp, cp) in grad.p.iter_mut().zip(count_grad) {
        *gp += s * cp;
    }
    Ok((gmm + s * count.value, grad))
}

/// Temporal consistency of offsets across three consecutive frames:
/// `sum_k S_t S_{t-1} log N(mu_t | mu_{t-1}, Sigma_{t-1})
///      + S_t S_{t+1} log N(mu_t | mu_{t+1}, Sigma_{t+1})`.
///
/// The returned value is a log-likelihood; callers subtract it from a loss to
/// penalize inconsistent offsets.
pub fn context_consistency(
    prev: &OutputMaps,
    cur: &OutputMaps,
    next: &OutputMaps,
    s_prev: &[bool],
    s_cur: &[bool],
    s_next: &[bool],
) -> Result<f64> {
    Ok(context_internal(prev, cur, next, s_prev, s_cur, s_next, false)?.0)
}

/// Gradients of [`context_consistency`] with respect to the three frames.
pub struct ContextGrad {
    pub prev: MapsGrad,
    pub cur: MapsGrad,
    pub next: MapsGrad,
}

/// [`context_consistency`] plus gradients for all three frames' maps.
pub fn context_consistency_grad(
    prev: &OutputMaps,
    cur: &OutputMaps,
    next: &OutputMaps,
    s_prev: &[bool],
    s_cur: &[bool],
    s_next: &[bool],
) -> Result<(f64, ContextGrad)> {
    let (value, grad) = context_internal(prev, cur, next, s_prev, s_cur, s_next, true)?;
    Ok((value, grad.expect("gradient requested")))
}

#[allow(clippy::too_many_arguments)]
fn context_internal(
    prev: &OutputMaps,
    cur: &OutputMaps,
    next: &OutputMaps,
    s_prev: &[bool],
    s_cur: &[bool],
    s_next: &[bool],
    want_grad: bool,
) -> Result<(f64, Option<ContextGrad>)> {
    for m in [prev, cur, next] {
        m.validate()?;
    }
    if prev.grid != cur.grid || next.grid != cur.grid {
        return Err(CoreError::DimMismatch(
            "context frames must share grid geometry".into(),
        ));
    }
    let n = cur.grid.n_pixels();
    if s_prev.len() != n || s_cur.len() != n || s_next.len() != n {
        return Err(CoreError::DimMismatch(
            "indicator lengths must match the grid".into(),
        ));
    }

    let mut grad = want_grad.then(|| ContextGrad {
        prev: MapsGrad::zeros(n),
        cur: MapsGrad::zeros(n),
        next: MapsGrad::zeros(n),
    });

    let mut total = 0.0;
    for k in 0..n {
        if !s_cur[k] {
            continue;
        }
        let mu_t = cur.mu(k);
        for (other, s_other, which) in [(prev, s_prev, 0usize), (next, s_next, 1)] {
            if !s_other[k] {
                continue;
            }
            let mu_o = other.mu(k);
            let sig_o = other.sigma(k);
            for ax in 0..3 {
                total += log_normal_1d(mu_t[ax], mu_o[ax], sig_o[ax]);
            }
            let Some(g) = grad.as_mut() else { continue };
            let (g_cur, g_other) = match which {
                0 => (&mut g.cur, &mut g.prev),
                _ => (&mut g.cur, &mut g.next),
            };
            for ax in 0..3 {
                let u = (mu_t[ax] - mu_o[ax]) / sig_o[ax];
                let d_mu_t = -u / sig_o[ax];
                let d_mu_o = u / sig_o[ax];
                let d_sig_o = (u * u - 1.0) / sig_o[ax];
                match ax {
                    0 => {
                        g_cur.dx[k] += d_mu_t;
                        g_other.dx[k] += d_mu_o;
                        g_other.sig_x[k] += d_sig_o;
                    }
                    1 => {
                        g_cur.dy[k] += d_mu_t;
                        g_other.dy[k] += d_mu_o;
                        g_other.sig_y[k] += d_sig_o;
                    }
                    _ => {
                        g_cur.dz[k] += d_mu_t;
                        g_other.dz[k] += d_mu_o;
                        g_other.sig_z[k] += d_sig_o;
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Binary cross-entropy style log-likelihood of pixel activations:
/// `sum_k S_k log p_k + (1 - S_k) log(1 - p_k)` with `p` clamped to
/// `[CE_CLAMP, 1 - CE_CLAMP]`.
pub fn bernoulli_crossentropy(p: &[f64], s: &[bool]) -> Result<f64> {
    if p.len() != s.len() {
        return Err(CoreError::DimMismatch(format!(
            "p has {} entries, indicators {}",
            p.len(),
            s.len()
        )));
    }
    Ok(p.iter()
        .zip(s)
        .map(|(&pk, &sk)| {
            let pc = pk.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            if sk {
                pc.ln()
            } else {
                (1.0 - pc).ln()
            }
        })
        .sum())
}

/// [`bernoulli_crossentropy`] plus its gradient with respect to `p`. Entries
/// outside the clamp interval get gradient 0.
pub fn bernoulli_crossentropy_grad(p: &[f64], s: &[bool]) -> Result<(f64, Vec<f64>)> {
    let value = bernoulli_crossentropy(p, s)?;
    let grad = p
        .iter()
        .zip(s)
        .map(|(&pk, &sk)| {
            if !(CE_CLAMP..=1.0 - CE_CLAMP).contains(&pk) {
                return 0.0;
            }
            if sk {
                1.0 / pk
            } else {
                -1.0 / (1.0 - pk)
            }
        })
        .collect();
    Ok((value, grad))
}

/// Self-normalized importance weights: softmax over `log_p_joint - log_q`.
pub fn importance_weights(log_p_joint: &[f64], log_q: &[f64]) -> Vec<f64> {
    let log_w: Vec<f64> = log_p_joint
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp - lq)
        .collect();
    let lse = logsumexp(&log_w);
    log_w.iter().map(|lw| (lw - lse).exp()).collect()
}

/// Importance-weighted lower bound on the evidence:
/// `log((1/J) sum_j w_j)` computed in log space. Equals the single-sample
/// ELBO term for `J = 1`.
pub fn iw_bound(log_p_joint: &[f64], log_q: &[f64]) -> f64 {
    let log_w: Vec<f64> = log_p_joint
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp - lq)
        .collect();
    logsumexp(&log_w) - (log_w.len() as f64).ln()
}

/// Wake-phase surrogate objective: `sum_j stop_grad(w_j) log q_j`. Its
/// gradient with respect to the `log_q` entries is exactly the normalized
/// weight vector.
pub fn rws_wake_objective(log_p_joint: &[f64], log_q: &[f64]) -> f64 {
    let w = importance_weights(log_p_joint, log_q);
    w.iter().zip(log_q).map(|(wj, lq)| wj * lq).sum()
}

/// Gradient of [`rws_wake_objective`] with respect to `log_q`, holding the
/// weights fixed.
pub fn rws_wake_grad(log_p_joint: &[f64], log_q: &[f64]) -> Vec<f64> {
    importance_weights(log_p_joint, log_q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn floor_nm(grid: &GridSpec) -> f64 {
        SIGMA_FLOOR_NORM * grid.pixel_size
    }

    /// Random but well-conditioned maps for gradient tests.
    fn random_maps(grid: GridSpec, rng: &mut ChaCha8Rng) -> OutputMaps {
        let n = grid.n_pixels();
        let mut maps = OutputMaps::zeros(grid);
        for k in 0..n {
            maps.p[k] = rng.random_range(0.05..0.95);
            maps.alpha[k] = rng.random_range(500.0..5000.0);
            maps.dx[k] = rng.random_range(-40.0..40.0);
            maps.dy[k] = rng.random_range(-40.0..40.0);
            maps.dz[k] = rng.random_range(-300.0..300.0);
            maps.sig_alpha[k] = rng.random_range(50.0..500.0);
            maps.sig_x[k] = rng.random_range(10.0..60.0);
            maps.sig_y[k] = rng.random_range(10.0..60.0);
            maps.sig_z[k] = rng.random_range(20.0..120.0);
        }
        maps
    }

    fn random_truth(grid: &GridSpec, count: usize, rng: &mut ChaCha8Rng) -> GroundTruthSet {
        let positions: Vec<[f64; 3]> = (0..count)
            .map(|_| {
                [
                    rng.random_range(0.0..grid.width as f64 * grid.pixel_size),
                    rng.random_range(0.0..grid.height as f64 * grid.pixel_size),
                    rng.random_range(-250.0..250.0),
                ]
            })
            .collect();
        let brightness = (0..count).map(|_| rng.random_range(800.0..4000.0)).collect();
        GroundTruthSet::from_positions(grid, positions, brightness)
    }

    #[test]
    fn single_pixel_at_mean_matches_closed_form() {
        let grid = GridSpec::new(1, 1, 100.0);
        let mut maps = OutputMaps::zeros(grid);
        maps.p[0] = 1.0;
        let s = 20.0;
        let f = floor_nm(&grid);
        maps.sig_x[0] = s - f;
        maps.sig_y[0] = s - f;
        maps.sig_z[0] = s - f;
        let truth = GroundTruthSet::from_positions(&grid, vec![maps.mu(0)], vec![1000.0]);
        let got = gmm_loglik(&maps, &truth, GmmOptions::default()).unwrap();
        let expect = -1.5 * (2.0 * std::f64::consts::PI * s * s).ln();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn uniform_p_matches_direct_sum_oracle() {
        let grid = GridSpec::new(4, 4, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut maps = random_maps(grid, &mut rng);
        for v in &mut maps.p {
            *v = 0.35;
        }
        let truth = random_truth(&grid, 1, &mut rng);
        let got = gmm_loglik(&maps, &truth, GmmOptions::default()).unwrap();

        // Direct, unfactored summation of w_k * N(x | mu_k, Sigma_k).
        let x = truth.positions[0];
        let mut direct = 0.0f64;
        for k in 0..16 {
            let mu = maps.mu(k);
            let sig = maps.sigma(k);
            let mut dens = 1.0 / 16.0;
            for ax in 0..3 {
                let u = (x[ax] - mu[ax]) / sig[ax];
                dens *= (-0.5 * u * u).exp() / (sig[ax] * (2.0 * std::f64::consts::PI).sqrt());
            }
            direct += dens;
        }
        assert_relative_eq!(got, direct.ln(), max_relative = 1e-12);
    }

    #[test]
    fn gmm_invariant_to_p_scaling() {
        let grid = GridSpec::new(5, 5, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut maps = random_maps(grid, &mut rng);
        // Leave headroom so scaling by up to 7 keeps p inside [0, 1].
        for v in &mut maps.p {
            *v /= 7.5;
        }
        let truth = random_truth(&grid, 3, &mut rng);
        let base = gmm_loglik(&maps, &truth, GmmOptions::default()).unwrap();
        for scale in [0.1, 2.0, 7.0] {
            let mut rescaled = maps.clone();
            for v in &mut rescaled.p {
                *v *= scale;
            }
            let got = gmm_loglik(&rescaled, &truth, GmmOptions::default()).unwrap();
            assert_relative_eq!(got, base, max_relative = 1e-12);
        }
    }

    #[test]
    fn empty_truth_is_zero_and_all_zero_p_is_degenerate() {
        let grid = GridSpec::new(3, 3, 100.0);
        let maps = OutputMaps::zeros(grid);
        let empty = GroundTruthSet::from_positions(&grid, vec![], vec![]);
        assert_eq!(gmm_loglik(&maps, &empty, GmmOptions::default()).unwrap(), 0.0);
        let truth = GroundTruthSet::from_positions(&grid, vec![[150.0, 150.0, 0.0]], vec![1.0]);
        assert!(gmm_loglik(&maps, &truth, GmmOptions::default()).is_err());
    }

    #[test]
    fn count_surrogate_single_pixel_case() {
        let out = count_loglik(&[0.5], 0.0);
        // log N(0 | 0.5, 0.25)
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() - 0.25 / (2.0 * 0.25);
        assert_relative_eq!(out.value, expect, epsilon = 1e-12);
        assert!(!out.degenerate);
    }

    #[test]
    fn count_surrogate_peaks_at_the_mean() {
        let p = [0.3, 0.8, 0.55, 0.2];
        let mean: f64 = p.iter().sum();
        let at_mean = count_loglik(&p, mean).value;
        for s in [mean - 0.7, mean + 0.4, 0.0] {
            assert!(count_loglik(&p, s).value <= at_mean);
        }
    }

    #[test]
    fn count_surrogate_flags_saturated_p() {
        let out = count_loglik(&[0.0, 1.0, 1.0], 2.0);
        assert!(out.degenerate);
        assert!(out.value.is_finite());
    }

    #[test]
    fn count_moments_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..=12);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let (mean, var) = crate::oracles::poisson_binomial_moments(&p);
            let m: f64 = p.iter().sum();
            let v: f64 = p.iter().map(|&x| x - x * x).sum();
            assert_relative_eq!(mean, m, epsilon = 1e-12, max_relative = 1e-12);
            assert_relative_eq!(var, v, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn total_loglik_composes_and_zero_case() {
        let grid = GridSpec::new(4, 4, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let maps = random_maps(grid, &mut rng);
        let truth = random_truth(&grid, 2, &mut rng);
        let total = total_loglik(&maps, &truth, GmmOptions::default()).unwrap();
        let gmm = gmm_loglik(&maps, &truth, GmmOptions::default()).unwrap();
        let count = count_loglik(&maps.p, 2.0).value;
        assert_relative_eq!(total, gmm + 2.0 * count, epsilon = 1e-12);

        // Empty truth with p = 0 everywhere: exactly zero.
        let zero = OutputMaps::zeros(grid);
        let empty = GroundTruthSet::from_positions(&grid, vec![], vec![]);
        assert_eq!(total_loglik(&zero, &empty, GmmOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn context_zero_when_no_current_activation() {
        let grid = GridSpec::new(2, 2, 100.0);
        let m = OutputMaps::zeros(grid);
        let s0 = vec![false; 4];
        let s1 = vec![true; 4];
        let v = context_consistency(&m, &m, &m, &s1, &s0, &s1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn context_at_equal_means_matches_closed_form() {
        let grid = GridSpec::new(1, 1, 100.0);
        let mut prev = OutputMaps::zeros(grid);
        let cur = OutputMaps::zeros(grid);
        let next = OutputMaps::zeros(grid);
        let s = 25.0;
        let f = floor_nm(&grid);
        prev.sig_x[0] = s - f;
        prev.sig_y[0] = s - f;
        prev.sig_z[0] = s - f;
        let on = vec![true];
        let off = vec![false];
        let v = context_consistency(&prev, &cur, &next, &on, &on, &off).unwrap();
        let expect = -1.5 * (2.0 * std::f64::consts::PI * s * s).ln();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn context_hand_computed_two_pixel_case() {
        let grid = GridSpec::new(2, 2, 100.0);
        let mut prev = OutputMaps::zeros(grid);
        let mut cur = OutputMaps::zeros(grid);
        let mut next = OutputMaps::zeros(grid);
        let f = floor_nm(&grid);
        // Pixel 0 pairs with prev, pixel 3 with next.
        cur.dx[0] = 10.0;
        prev.dx[0] = -5.0;
        for sig in [&mut prev.sig_x, &mut prev.sig_y, &mut prev.sig_z] {
            sig[0] = 30.0 - f;
        }
        cur.dz[3] = 40.0;
        next.dz[3] = 20.0;
        for sig in [&mut next.sig_x, &mut next.sig_y, &mut next.sig_z] {
            sig[3] = 50.0 - f;
        }
        let s_cur = vec![true, false, false, true];
        let s_prev = vec![true, false, false, false];
        let s_next = vec![false, false, false, true];
        let got = context_consistency(&prev, &cur, &next, &s_prev, &s_cur, &s_next).unwrap();

        let ln_n = |d: f64, s: f64| -0.5 * (d / s) * (d / s) - s.ln() - 0.5 * LN_2PI;
        let expect = ln_n(15.0, 30.0) + 2.0 * ln_n(0.0, 30.0) // pixel 0 vs prev
            + ln_n(20.0, 50.0) + 2.0 * ln_n(0.0, 50.0); // pixel 3 vs next
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn bce_basics() {
        let p = [0.5, 0.5, 0.5];
        let s = [true, false, true];
        let v = bernoulli_crossentropy(&p, &s).unwrap();
        assert_relative_eq!(v, 3.0 * 0.5f64.ln(), epsilon = 1e-12);

        // p equal to the indicators: ~0 up to the clamp epsilon.
        let exact = bernoulli_crossentropy(&[1.0, 0.0], &[true, false]).unwrap();
        assert!(exact.abs() < 1e-6);

        // Direct per-pixel summation oracle on random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let s: Vec<bool> = (0..64).map(|_| rng.random::<bool>()).collect();
        let got = bernoulli_crossentropy(&p, &s).unwrap();
        let mut direct = 0.0;
        for k in 0..64 {
            let pc = p[k].clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            direct += if s[k] { pc.ln() } else { (1.0 - pc).ln() };
        }
        assert_relative_eq!(got, direct, epsilon = 1e-12);
    }

    #[test]
    fn importance_weights_cases() {
        assert_eq!(importance_weights(&[1.3], &[0.1]), vec![1.0]);
        let w = importance_weights(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0]);
        for v in w {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let w = importance_weights(&[0.0, 3.0f64.ln()], &[0.0, 0.0]);
        assert_relative_eq!(w[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.75, epsilon = 1e-12);
        // Invariance to a constant shift of all log ratios.
        let a = importance_weights(&[0.4, -1.2, 0.9], &[0.0, 0.3, -0.4]);
        let b = importance_weights(&[5.4, 3.8, 5.9], &[0.0, 0.3, -0.4]);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iw_bound_cases_and_jensen() {
        // J = 1 reduces to the single ELBO term.
        assert_relative_eq!(iw_bound(&[0.7], &[0.2]), 0.5, epsilon = 1e-12);
        // All weights equal c: bound is log c.
        let c = 2.5f64;
        let lw = [c.ln(); 4];
        assert_relative_eq!(iw_bound(&lw, &[0.0; 4]), c.ln(), epsilon = 1e-12);
        // Bound >= mean of log w on random draws (Jensen).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let j = rng.random_range(1..=16);
            let lp: Vec<f64> = (0..j).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lq: Vec<f64> = (0..j).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mean_lw: f64 = lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| a - b)
                .sum::<f64>()
                / j as f64;
            assert!(iw_bound(&lp, &lq) >= mean_lw - 1e-12);
        }
    }

    #[test]
    fn iw_bound_tightens_with_more_samples_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sum1 = 0.0;
        let mut sum8 = 0.0;
        for _ in 0..1000 {
            let lw: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zeros = vec![0.0; 8];
            sum8 += iw_bound(&lw, &zeros);
            sum1 += iw_bound(&lw[..1], &zeros[..1]);
        }
        assert!(sum8 / 1000.0 >= sum1 / 1000.0);
    }

    #[test]
    fn rws_wake_cases() {
        assert_relative_eq!(rws_wake_objective(&[0.7], &[-1.3]), -1.3, epsilon = 1e-12);
        // Uniform weights: mean of log q.
        let lq = [-0.5, -1.5, -2.5];
        let v = rws_wake_objective(&[0.0; 3], &[0.0; 3]);
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        let v = rws_wake_objective(&[1.0; 3], &lq.map(|x| x * 0.0));
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        // Frozen-weight gradient equals the weights.
        let lp = [0.3, -0.6, 1.1];
        let lq = [-0.2, 0.4, 0.0];
        let w = importance_weights(&lp, &lq);
        let g = rws_wake_grad(&lp, &lq);
        assert_eq!(w, g);
        // Finite differences of the frozen-weight surrogate.
        let h = 1e-6;
        for j in 0..3 {
            let mut hi = lq;
            let mut lo = lq;
            hi[j] += h;
            lo[j] -= h;
            let frozen = |q: &[f64; 3]| -> f64 {
                w.iter().zip(q).map(|(wj, lqj)| wj * lqj).sum()
            };
            let fd = (frozen(&hi) - frozen(&lo)) / (2.0 * h);
            assert_relative_eq!(fd, g[j], max_relative = 1e-6);
        }
    }

    // Central finite-difference checks of every analytic gradient.

    fn fd_scale(v: f64) -> f64 {
        v.abs().max(1.0) * 1e-6
    }

    /// `atol` is the roundoff floor of the central difference itself,
    /// O(eps * |f| / h); below it the FD oracle carries no information.
    fn assert_close(analytic: f64, fd: f64, atol: f64, what: &str) {
        if (analytic - fd).abs() <= atol {
            return;
        }
        let scale = analytic.abs().max(fd.abs());
        assert!(
            (analytic - fd).abs() / scale < 1e-4,
            "{what}: analytic {analytic} vs fd {fd} (atol {atol})"
        );
    }

    /// Check d(value)/d(entry) for every channel entry of `maps`.
    fn check_maps_gradient<F>(maps: &OutputMaps, analytic: &MapsGrad, eval: F, what: &str)
    where
        F: Fn(&OutputMaps) -> f64,
    {
        let n = maps.p.len();
        type Chan = (
            fn(&OutputMaps) -> &Vec<f64>,
            fn(&mut OutputMaps) -> &mut Vec<f64>,
            fn(&MapsGrad) -> &Vec<f64>,
            &'static str,
        );
        let channels: [Chan; 9] = [
            (|m| &m.p, |m| &mut m.p, |g| &g.p, "p"),
            (|m| &m.alpha, |m| &mut m.alpha, |g| &g.alpha, "alpha"),
            (|m| &m.dx, |m| &mut m.dx, |g| &g.dx, "dx"),
            (|m| &m.dy, |m| &mut m.dy, |g| &g.dy, "dy"),
            (|m| &m.dz, |m| &mut m.dz, |g| &g.dz, "dz"),
            (
                |m| &m.sig_alpha,
                |m| &mut m.sig_alpha,
                |g| &g.sig_alpha,
                "sig_alpha",
            ),
            (|m| &m.sig_x, |m| &mut m.sig_x, |g| &g.sig_x, "sig_x"),
            (|m| &m.sig_y, |m| &mut m.sig_y, |g| &g.sig_y, "sig_y"),
            (|m| &m.sig_z, |m| &mut m.sig_z, |g| &g.sig_z, "sig_z"),
        ];
        for (getter, setter, ggetter, name) in channels {
            for k in 0..n {
                let base = getter(maps)[k];
                let mut h = fd_scale(base);
                if name == "p" {
                    // Stay inside [0, 1].
                    h = h.min(0.5 * base.min(1.0 - base).max(1e-7));
                }
                let mut hi = maps.clone();
                setter(&mut hi)[k] = base + h;
                let mut lo = maps.clone();
                setter(&mut lo)[k] = base - h;
                let (f_hi, f_lo) = (eval(&hi), eval(&lo));
                let fd = (f_hi - f_lo) / (2.0 * h);
                let atol = (f_hi.abs() + f_lo.abs()).max(1.0) / h * 1e-12;
                assert_close(ggetter(analytic)[k], fd, atol, &format!("{what} {name}[{k}]"));
            }
        }
    }

    #[test]
    fn gmm_gradient_matches_fd() {
        let grid = GridSpec::new(3, 3, 100.0);
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let maps = random_maps(grid, &mut rng);
            let truth = random_truth(&grid, 2, &mut rng);
            for opts in [
                GmmOptions::default(),
                GmmOptions {
                    include_brightness: true,
                },
            ] {
                let (_, g) = gmm_loglik_grad(&maps, &truth, opts).unwrap();
                check_maps_gradient(
                    &maps,
                    &g,
                    |m| gmm_loglik(m, &truth, opts).unwrap(),
                    "gmm",
                );
            }
        }
    }

    #[test]
    fn count_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..10 {
            let n = rng.random_range(2..20);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let s = rng.random_range(0.0..n as f64);
            let (_, g) = count_loglik_grad(&p, s);
            for k in 0..n {
                let h = 1e-6;
                let mut hi = p.clone();
                hi[k] += h;
                let mut lo = p.clone();
                lo[k] -= h;
                let fd = (count_loglik(&hi, s).value - count_loglik(&lo, s).value) / (2.0 * h);
                assert_close(g[k], fd, 1e-9, "count p");
            }
        }
    }

    #[test]
    fn total_gradient_matches_fd() {
        let grid = GridSpec::new(3, 3, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let maps = random_maps(grid, &mut rng);
        let truth = random_truth(&grid, 2, &mut rng);
        let opts = GmmOptions::default();
        let (_, g) = total_loglik_grad(&maps, &truth, opts).unwrap();
        check_maps_gradient(&maps, &g, |m| total_loglik(m, &truth, opts).unwrap(), "total");
    }

    #[test]
    fn context_gradient_matches_fd() {
        let grid = GridSpec::new(2, 2, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let prev = random_maps(grid, &mut rng);
        let cur = random_maps(grid, &mut rng);
        let next = random_maps(grid, &mut rng);
        let s: Vec<bool> = vec![true, true, false, true];
        let (_, g) =
            context_consistency_grad(&prev, &cur, &next, &s, &s, &s).unwrap();
        let eval_prev =
            |m: &OutputMaps| context_consistency(m, &cur, &next, &s, &s, &s).unwrap();
        check_maps_gradient(&prev, &g.prev, eval_prev, "context prev");
        let eval_cur =
            |m: &OutputMaps| context_consistency(&prev, m, &next, &s, &s, &s).unwrap();
        check_maps_gradient(&cur, &g.cur, eval_cur, "context cur");
        let eval_next =
            |m: &OutputMaps| context_consistency(&prev, &cur, m, &s, &s, &s).unwrap();
        check_maps_gradient(&next, &g.next, eval_next, "context next");
    }

    #[test]
    fn bce_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let p: Vec<f64> = (0..32).map(|_| rng.random_range(0.02..0.98)).collect();
        let s: Vec<bool> = (0..32).map(|_| rng.random()).collect();
        let (_, g) = bernoulli_crossentropy_grad(&p, &s).unwrap();
        for k in 0..p.len() {
            let h = 1e-7;
            let mut hi = p.clone();
            hi[k] += h;
            let mut lo = p.clone();
            lo[k] -= h;
            let fd = (bernoulli_crossentropy(&hi, &s).unwrap()
                - bernoulli_crossentropy(&lo, &s).unwrap())
                / (2.0 * h);
            assert_close(g[k], fd, 1e-7, "bce p");
        }
    }
}
