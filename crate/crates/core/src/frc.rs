//! Fourier ring correlation: resolution estimation from the spectral
//! correlation of two independent reconstructions of the same sample.

use crate::grid::Image;
use crate::{CoreError, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// The standard fixed threshold for the resolution criterion.
pub const FRC_THRESHOLD: f64 = 0.143;

/// Correlation per integer-radius frequency ring.
#[derive(Debug, Clone, PartialEq)]
pub struct FrcCurve {
    /// Spatial frequency of each ring in nm^-1, strictly increasing.
    pub freq: Vec<f64>,
    /// Ring correlations, in [-1, 1] up to rounding.
    pub corr: Vec<f64>,
    /// Number of Fourier samples accumulated per ring.
    pub counts: Vec<usize>,
}

/// Resolution estimate from an FRC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrcResolution {
    /// Resolution in nm (the inverse of the threshold-crossing frequency, or
    /// the Nyquist-limited value when the curve never crosses).
    pub resolution: f64,
    /// False when the curve never dropped below the threshold; the reported
    /// value is then the Nyquist limit `2 * pixel_size`.
    pub crossed: bool,
}

/// In-place 2D FFT of `n x n` row-major data.
fn fft_2d(data: &mut [Complex<f64>], n: usize) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    for row in data.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    // Transpose, transform the columns as rows, transpose back.
    transpose(data, n);
    for row in data.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
    }
    transpose(data, n);
}

fn transpose(data: &mut [Complex<f64>], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Fourier ring correlation of two equally sized square images.
///
/// Images are zero-padded to the next power-of-two side, transformed, and
/// correlated per integer-radius ring up to the Nyquist ring `n/2`:
/// `FRC(q) = Re sum F_A conj(F_B) / sqrt(sum |F_A|^2 sum |F_B|^2)`.
pub fn frc_curve(a: &Image, b: &Image, pixel_size: f64) -> Result<FrcCurve> {
    if a.width != b.width || a.height != b.height {
        return Err(CoreError::DimMismatch(format!(
            "frc images differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width != a.height {
        return Err(CoreError::DimMismatch(format!(
            "frc requires square images, got {}x{}",
            a.width, a.height
        )));
    }
    if !(pixel_size > 0.0) {
        return Err(CoreError::InvalidParam("pixel_size must be positive".into()));
    }
    let n = a.width.max(2).next_power_of_two();
    let embed = |img: &Image| -> Vec<Complex<f64>> {
        let mut out = vec![Complex::default(); n * n];
        for y in 0..img.height {
            for x in 0..img.width {
                out[y * n + x] = Complex::new(img.get(x, y), 0.0);
            }
        }
        out
    };
    let mut fa = embed(a);
    let mut fb = embed(b);
    fft_2d(&mut fa, n);
    fft_2d(&mut fb, n);

    let n_rings = n / 2 + 1;
    let mut num = vec![0.0f64; n_rings];
    let mut pow_a = vec![0.0f64; n_rings];
    let mut pow_b = vec![0.0f64; n_rings];
    let mut counts = vec![0usize; n_rings];
    for ky in 0..n {
        let fy = signed_freq(ky, n);
        for kx in 0..n {
            let fx = signed_freq(kx, n);
            let r = (((fx * fx + fy * fy) as f64).sqrt()).round() as usize;
            if r >= n_rings {
                continue;
            }
            let va = fa[ky * n + kx];
            let vb = fb[ky * n + kx];
            num[r] += (va * vb.conj()).re;
            pow_a[r] += va.norm_sqr();
            pow_b[r] += vb.norm_sqr();
            counts[r] += 1;
        }
    }

    let mut freq = Vec::with_capacity(n_rings);
    let mut corr = Vec::with_capacity(n_rings);
    for r in 0..n_rings {
        freq.push(r as f64 / (n as f64 * pixel_size));
        let denom = (pow_a[r] * pow_b[r]).sqrt();
        corr.push(if denom > 0.0 { num[r] / denom } else { 0.0 });
    }
    Ok(FrcCurve { freq, corr, counts })
}

fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// First frequency where the curve drops below `threshold`, linearly
/// interpolated between rings; resolution is its inverse. A curve that never
/// crosses reports the Nyquist-limited resolution with `crossed = false`.
pub fn frc_resolution(curve: &FrcCurve, threshold: f64) -> Result<FrcResolution> {
    if curve.corr.is_empty() {
        return Err(CoreError::InvalidParam("empty FRC curve".into()));
    }
    for i in 1..curve.corr.len() {
        let (c0, c1) = (curve.corr[i - 1], curve.corr[i]);
        if c1 < threshold && c0 >= threshold {
            let t = (c0 - threshold) / (c0 - c1);
            let f = curve.freq[i - 1] + t * (curve.freq[i] - curve.freq[i - 1]);
            return Ok(FrcResolution {
                resolution: 1.0 / f,
                crossed: true,
            });
        }
    }
    let f_max = *curve.freq.last().unwrap();
    Ok(FrcResolution {
        resolution: 1.0 / f_max,
        crossed: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(n: usize, rng: &mut ChaCha8Rng) -> Image {
        Image {
            width: n,
            height: n,
            data: (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect(),
        }
    }

    #[test]
    fn identical_images_correlate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = noise_image(64, &mut rng);
        let curve = frc_curve(&img, &img, 10.0).unwrap();
        for (&c, &n) in curve.corr.iter().zip(&curve.counts) {
            if n > 0 {
                assert!((c - 1.0).abs() < 1e-9, "ring corr {c}");
            }
        }
        // Never crosses: Nyquist sentinel at 2 * pixel size.
        let res = frc_resolution(&curve, FRC_THRESHOLD).unwrap();
        assert!(!res.crossed);
        assert!((res.resolution - 20.0).abs() < 1e-9);
    }

    #[test]
    fn scaling_either_image_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = noise_image(32, &mut rng);
        let b = noise_image(32, &mut rng);
        let base = frc_curve(&a, &b, 10.0).unwrap();
        let mut b2 = b.clone();
        for v in &mut b2.data {
            *v *= 2.0;
        }
        let scaled = frc_curve(&a, &b2, 10.0).unwrap();
        for (x, y) in base.corr.iter().zip(&scaled.corr) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_rings_hover_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = noise_image(256, &mut rng);
        let b = noise_image(256, &mut rng);
        let curve = frc_curve(&a, &b, 10.0).unwrap();
        let qualifying: Vec<f64> = curve
            .corr
            .iter()
            .zip(&curve.counts)
            .filter(|(_, &n)| n >= 100)
            .map(|(&c, _)| c.abs())
            .collect();
        assert!(qualifying.len() > 50);
        let below = qualifying.iter().filter(|&&c| c < 0.1).count();
        assert!(
            below as f64 / qualifying.len() as f64 >= 0.9,
            "only {below}/{} rings below 0.1",
            qualifying.len()
        );
    }

    #[test]
    fn interpolated_crossing_matches_hand_computation() {
        // Correlation 1 below ring 5, 0 from ring 5 on.
        let freq: Vec<f64> = (0..9).map(|r| r as f64 / (16.0 * 10.0)).collect();
        let mut corr = vec![1.0; 9];
        for c in corr.iter_mut().skip(5) {
            *c = 0.0;
        }
        let counts = vec![10; 9];
        let curve = FrcCurve { freq, corr, counts };
        let res = frc_resolution(&curve, 0.143).unwrap();
        assert!(res.crossed);
        // Crossing between rings 4 and 5 at fraction (1 - 0.143) / 1.
        let f4 = 4.0 / 160.0;
        let f5 = 5.0 / 160.0;
        let f = f4 + (f5 - f4) * (1.0 - 0.143);
        assert!((res.resolution - 1.0 / f).abs() < 1e-12);
    }

    #[test]
    fn lower_curves_never_improve_resolution() {
        let freq: Vec<f64> = (0..33).map(|r| r as f64 / (64.0 * 10.0)).collect();
        let corr: Vec<f64> = (0..33).map(|r| 1.0 - r as f64 / 20.0).collect();
        let counts = vec![10; 33];
        let curve = FrcCurve {
            freq: freq.clone(),
            corr: corr.clone(),
            counts: counts.clone(),
        };
        let lower = FrcCurve {
            freq,
            corr: corr.iter().map(|c| c - 0.2).collect(),
            counts,
        };
        let r0 = frc_resolution(&curve, 0.143).unwrap();
        let r1 = frc_resolution(&lower, 0.143).unwrap();
        assert!(r1.resolution >= r0.resolution);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = Image::zeros(16, 16);
        let b = Image::zeros(32, 32);
        assert!(frc_curve(&a, &b, 10.0).is_err());
        let c = Image::zeros(16, 8);
        assert!(frc_curve(&c, &c, 10.0).is_err());
    }

    #[test]
    fn non_pow2_inputs_are_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = noise_image(48, &mut rng);
        let curve = frc_curve(&img, &img, 10.0).unwrap();
        // Padded to 64: rings up to 32, frequencies on the padded grid.
        assert_eq!(curve.corr.len(), 33);
        assert!((curve.freq[1] - 1.0 / 640.0).abs() < 1e-15);
    }
}
