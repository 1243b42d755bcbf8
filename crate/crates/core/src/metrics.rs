//! Scoring localization tables against ground truth: optimal matching,
//! Jaccard index, RMSE and the combined efficiency score.

use crate::table::{LocRecord, LocalizationTable};
use std::collections::BTreeMap;

/// Matching radius test: lateral circle (default) or 3D sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    #[default]
    Lateral,
    Volume,
}

/// One matched (prediction, truth) pair with its matching-mode distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub pred: usize,
    pub truth: usize,
    pub distance: f64,
}

/// Outcome of matching predictions against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub tp: usize,
    pub fp: usize,
    pub n_fn: usize,
}

fn mode_distance(a: &LocRecord, b: &LocRecord, mode: MatchMode) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    match mode {
        MatchMode::Lateral => (dx * dx + dy * dy).sqrt(),
        MatchMode::Volume => {
            let dz = a.z - b.z;
            (dx * dx + dy * dy + dz * dz).sqrt()
        }
    }
}

/// Match predictions to ground truth per frame: maximum-cardinality
/// one-to-one matching among pairs within `radius`, and among maximum
/// matchings one of minimum total distance (Hungarian algorithm on a padded
/// cost matrix).
pub fn match_localizations(
    pred: &[LocRecord],
    truth: &[LocRecord],
    radius: f64,
    mode: MatchMode,
) -> MatchResult {
    assert!(radius > 0.0, "radius must be positive");
    let mut frames: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, r) in pred.iter().enumerate() {
        frames.entry(r.frame).or_default().0.push(i);
    }
    for (j, r) in truth.iter().enumerate() {
        frames.entry(r.frame).or_default().1.push(j);
    }

    let mut pairs = Vec::new();
    for (_, (p_idx, t_idx)) in frames {
        if p_idx.is_empty() || t_idx.is_empty() {
            continue;
        }
        let np = p_idx.len();
        let nt = t_idx.len();
        let n = np.max(nt);
        // Any infeasible assignment must cost more than every feasible
        // matching can save, so cardinality dominates total distance.
        let big = (np.min(nt) as f64 + 1.0) * radius + 1.0;
        let mut cost = vec![vec![0.0f64; n]; n];
        for (ri, &pi) in p_idx.iter().enumerate() {
            for (ci, &tj) in t_idx.iter().enumerate() {
                let d = mode_distance(&pred[pi], &truth[tj], mode);
                cost[ri][ci] = if d <= radius { d } else { big };
            }
        }
        let assignment = hungarian_min_cost(&cost);
        for (ri, ci) in assignment.into_iter().enumerate() {
            if ri >= np || ci >= nt {
                continue;
            }
            let (pi, tj) = (p_idx[ri], t_idx[ci]);
            let d = mode_distance(&pred[pi], &truth[tj], mode);
            if d <= radius {
                pairs.push(MatchPair {
                    pred: pi,
                    truth: tj,
                    distance: d,
                });
            }
        }
    }

    let tp = pairs.len();
    MatchResult {
        tp,
        fp: pred.len() - tp,
        n_fn: truth.len() - tp,
        pairs,
    }
}

/// Minimum-cost perfect assignment on a square cost matrix via shortest
/// augmenting paths with potentials, O(n^3). Returns, per row, the assigned
/// column.
fn hungarian_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; p[j] is the row matched to column j, 0 means free.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Jaccard detection score `100 * TP / (TP + FP + FN)`. Two empty sets agree
/// perfectly by convention and score 100.
pub fn jaccard(m: &MatchResult) -> f64 {
    let denom = m.tp + m.fp + m.n_fn;
    if denom == 0 {
        return 100.0;
    }
    100.0 * m.tp as f64 / denom as f64
}

/// Which displacement enters the RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmseMode {
    Lateral,
    Axial,
    Volume,
}

/// Root-mean-square error over matched pairs; `None` when nothing matched.
pub fn rmse(
    m: &MatchResult,
    pred: &[LocRecord],
    truth: &[LocRecord],
    mode: RmseMode,
) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    let sum: f64 = m
        .pairs
        .iter()
        .map(|pair| {
            let a = &pred[pair.pred];
            let b = &truth[pair.truth];
            let dx = a.x - b.x;
            let dy = a.y - b.y;
            let dz = a.z - b.z;
            match mode {
                RmseMode::Lateral => dx * dx + dy * dy,
                RmseMode::Axial => dz * dz,
                RmseMode::Volume => dx * dx + dy * dy + dz * dz,
            }
        })
        .sum();
    Some((sum / m.pairs.len() as f64).sqrt())
}

/// Combined detection/precision score
/// `E = 100 - sqrt((100 - J)^2 + alpha^2 RMSE^2)`.
pub fn efficiency(jaccard_pct: f64, rmse_nm: f64, alpha: f64) -> f64 {
    100.0 - ((100.0 - jaccard_pct).powi(2) + alpha * alpha * rmse_nm * rmse_nm).sqrt()
}

/// 3D efficiency: mean of the lateral (alpha = 0.5) and axial (alpha = 1.0)
/// efficiencies.
pub fn efficiency_3d(jaccard_pct: f64, rmse_lateral: f64, rmse_axial: f64) -> f64 {
    0.5 * (efficiency(jaccard_pct, rmse_lateral, 0.5) + efficiency(jaccard_pct, rmse_axial, 1.0))
}

/// Split rows in time order into consecutive blocks of `block_size`; even
/// blocks go to the first table, odd blocks to the second.
pub fn split_even_odd_blocks(
    table: &[LocRecord],
    block_size: usize,
) -> (LocalizationTable, LocalizationTable) {
    assert!(block_size >= 1, "block_size must be at least 1");
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, row) in table.iter().enumerate() {
        if (i / block_size) % 2 == 0 {
            a.push(*row);
        } else {
            b.push(*row);
        }
    }
    (a, b)
}
