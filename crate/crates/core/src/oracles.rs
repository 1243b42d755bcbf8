//! Brute-force reference implementations used by the test suites to check the
//! optimized code paths. Deliberately written in the most literal way
//! possible; none of the pipeline code calls into this module.

/// Mean and variance of the Poisson-binomial distribution by exhaustive
/// enumeration of all 2^n outcomes. Compensated summation keeps the
/// accumulation error near machine epsilon. Intended for `n <= ~20`.
pub fn poisson_binomial_moments(p: &[f64]) -> (f64, f64) {
    let n = p.len();
    assert!(n <= 25, "enumeration oracle limited to small n");
    let mut mean = KahanSum::default();
    let mut second = KahanSum::default();
    for mask in 0u64..(1u64 << n) {
        let mut prob = 1.0;
        let mut count = 0u32;
        for (i, &pi) in p.iter().enumerate() {
            if mask >> i & 1 == 1 {
                prob *= pi;
                count += 1;
            } else {
                prob *= 1.0 - pi;
            }
        }
        mean.add(prob * count as f64);
        second.add(prob * (count * count) as f64);
    }
    let m = mean.value();
    (m, second.value() - m * m)
}

/// Straight-line non-maximum suppression reference: candidates are strict
/// 3x3 maxima with `p > low`; a candidate is kept when its probability plus
/// that of its 4 edge neighbors exceeds `high`. Returns `(pixel index,
/// aggregated probability)` in row-major order.
pub fn nms_reference(p: &[f64], width: usize, height: usize, low: f64, high: f64) -> Vec<(usize, f64)> {
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            0.0
        } else {
            p[y as usize * width + x as usize]
        }
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            let v = at(x, y);
            if v <= low {
                continue;
            }
            let mut strict_max = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if at(x + dx, y + dy) >= v {
                        strict_max = false;
                    }
                }
            }
            if !strict_max {
                continue;
            }
            let agg = v + at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            if agg > high {
                out.push((y as usize * width + x as usize, agg));
            }
        }
    }
    out
}

/// Exhaustive optimal matching between two small point sets: over all
/// one-to-one assignments using only pairs within `radius`, maximize the
/// number of pairs and among those minimize the total distance. Returns
/// `(pair count, total distance)`.
pub fn bruteforce_match(pred: &[[f64; 2]], truth: &[[f64; 2]], radius: f64) -> (usize, f64) {
    fn recurse(
        pred: &[[f64; 2]],
        truth: &[[f64; 2]],
        radius: f64,
        i: usize,
        used: &mut Vec<bool>,
        best: &mut (usize, f64),
        count: usize,
        total: f64,
    ) {
        if i == pred.len() {
            if count > best.0 || (count == best.0 && total < best.1) {
                *best = (count, total);
            }
            return;
        }
        // Leave pred[i] unmatched.
        recurse(pred, truth, radius, i + 1, used, best, count, total);
        for j in 0..truth.len() {
            if used[j] {
                continue;
            }
            let d = ((pred[i][0] - truth[j][0]).powi(2) + (pred[i][1] - truth[j][1]).powi(2)).sqrt();
            if d <= radius {
                used[j] = true;
                recurse(pred, truth, radius, i + 1, used, best, count + 1, total + d);
                used[j] = false;
            }
        }
    }
    let mut used = vec![false; truth.len()];
    let mut best = (0usize, f64::INFINITY);
    recurse(pred, truth, radius, 0, &mut used, &mut best, 0, 0.0);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

/// Compensated (Kahan) accumulator.
#[derive(Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}
