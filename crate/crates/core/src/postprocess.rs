//! From probability maps to discrete localizations, and table clean-up:
//! non-maximum suppression, CDF de-biasing of in-pixel offsets, sigma
//! filtering and consecutive-frame grouping.

use crate::grid::GridSpec;
use crate::loss::OutputMaps;
use crate::table::{LocRecord, LocalizationTable};

/// Candidate threshold of the non-maximum suppression.
pub const NMS_PEAK_THRESHOLD: f64 = 0.3;
/// Aggregated-probability threshold of the non-maximum suppression.
pub const NMS_FINAL_THRESHOLD: f64 = 0.7;

/// Non-maximum suppression on a detection-probability map.
///
/// A pixel is a candidate when `p > low` and it is a strict maximum of its
/// 3x3 neighborhood (out-of-field neighbors count as 0, plateau ties yield no
/// candidate). Each candidate aggregates the probability of its 4
/// edge-adjacent pixels; candidates with aggregate `> high` are returned as
/// `(pixel index, aggregated probability)`.
///
/// Neighbor mass is read, not consumed: two adjacent candidates may both
/// count a shared neighbor.
pub fn nms_detect(p: &[f64], width: usize, height: usize, low: f64, high: f64) -> Vec<(usize, f64)> {
    assert_eq!(p.len(), width * height, "map size mismatch");
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
            let agg = v + at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            if agg > high {
                out.push((y as usize * width + x as usize, agg));
            }
        }
    }
    out
}

/// Turn detections on one frame's output maps into table rows. Each row takes
/// the detected pixel's mean, brightness and (floored) sigma channels; the
/// probability is the aggregated NMS mass clamped to 1.
pub fn maps_to_table(
    maps: &OutputMaps,
    detections: &[(usize, f64)],
    frame: u32,
) -> LocalizationTable {
    detections
        .iter()
        .map(|&(k, agg)| {
            let mu = maps.mu(k);
            let sigma = maps.sigma(k);
            LocRecord {
                frame,
                x: mu[0],
                y: mu[1],
                z: mu[2],
                photons: maps.alpha[k],
                prob: agg.min(1.0),
                sig_x: sigma[0],
                sig_y: sigma[1],
                sig_z: sigma[2],
            }
        })
        .collect()
}

/// De-bias lateral in-pixel offsets with per-bin empirical CDFs.
///
/// Rows are split into `n_bins` equal-count bins by `var_tot`; within each
/// bin the in-pixel offsets are replaced by `(F(offset) - 0.5) * pitch`,
/// where `F` is the midrank empirical CDF of that bin (ties share a value,
/// rank order is preserved). `z` and all other columns are untouched. Bins
/// with fewer than 10 rows pass through unchanged; their count is returned
/// alongside the table.
pub fn cdf_debias(
    table: &[LocRecord],
    n_bins: usize,
    pixel_size: f64,
) -> (LocalizationTable, usize) {
    assert!(n_bins >= 1, "n_bins must be at least 1");
    let n = table.len();
    let mut out = table.to_vec();
    if n == 0 {
        return (out, 0);
    }
    let grid_axis = |v: f64| -> (f64, f64) {
        // (pixel center, in-pixel offset)
        let cell = (v / pixel_size).floor();
        let center = (cell + 0.5) * pixel_size;
        (center, v - center)
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        table[a]
            .var_tot()
            .partial_cmp(&table[b].var_tot())
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut flagged = 0usize;
    let base = n / n_bins;
    let rem = n % n_bins;
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < rem);
        let bin = &order[start..start + size];
        start += size;
        if bin.is_empty() {
            continue;
        }
        if bin.len() < 10 {
            flagged += 1;
            continue;
        }
        let pick_x: fn(&LocRecord) -> f64 = |r| r.x;
        let pick_y: fn(&LocRecord) -> f64 = |r| r.y;
        for (axis, pick) in [(0usize, pick_x), (1, pick_y)] {
            let offsets: Vec<f64> = bin.iter().map(|&i| grid_axis(pick(&table[i])).1).collect();
            let ranks = midranks(&offsets);
            for (slot, &i) in bin.iter().enumerate() {
                let u = (ranks[slot] - 0.5) / bin.len() as f64;
                let (center, _) = grid_axis(pick(&table[i]));
                let new_val = center + (u - 0.5) * pixel_size;
                if axis == 0 {
                    out[i].x = new_val;
                } else {
                    out[i].y = new_val;
                }
            }
        }
    }
    (out, flagged)
}

/// Midranks (1-based, ties averaged) of the values.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Drop the `ceil(drop_fraction * n)` rows with the largest `var_tot`,
/// keeping the remaining rows in their original order.
pub fn filter_by_sigma(table: &[LocRecord], drop_fraction: f64) -> LocalizationTable {
    assert!(
        (0.0..1.0).contains(&drop_fraction),
        "drop_fraction must be in [0, 1)"
    );
    let n = table.len();
    let k = (drop_fraction * n as f64).ceil() as usize;
    if k == 0 {
        return table.to_vec();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        table[a]
            .var_tot()
            .partial_cmp(&table[b].var_tot())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut drop = vec![false; n];
    for &i in &order[n - k..] {
        drop[i] = true;
    }
    table
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(r, _)| *r)
        .collect()
}

/// Merge chains of localizations appearing in consecutive frames within a
/// lateral radius, assuming they belong to one emitter.
///
/// Linking is greedy frame-to-frame by smallest distance. A merged chain
/// becomes one row: inverse-variance weighted positions, photons summed,
/// `sigma_axis = (sum sigma_axis^-2)^(-1/2)`, frame = first frame of the
/// chain, probability = maximum over the chain. Single-row chains pass
/// through bit-identically, which makes the operation idempotent.
pub fn group_localizations(table: &[LocRecord], radius: f64) -> LocalizationTable {
    assert!(radius > 0.0, "radius must be positive");
    let mut rows = table.to_vec();
    rows.sort_by_key(|r| r.frame);

    let mut merged: Vec<LocRecord> = Vec::new();
    // Chains still extendable: (rows of the chain, frame of the last row).
    let mut open: Vec<Vec<LocRecord>> = Vec::new();

    let mut i = 0;
    while i <= rows.len() {
        // Identify the frame block starting at i (a sentinel pass with an
        // empty block flushes remaining chains at the end).
        let frame = rows.get(i).map(|r| r.frame);
        let mut j = i;
        while j < rows.len() && Some(rows[j].frame) == frame {
            j += 1;
        }
        let block = &rows[i..j];

        // Split open chains into those ending exactly one frame before this
        // block (linkable) and the rest (closed now).
        let mut linkable: Vec<Vec<LocRecord>> = Vec::new();
        for chain in open.drain(..) {
            let last_frame = chain.last().unwrap().frame;
            if frame == Some(last_frame + 1) {
                linkable.push(chain);
            } else {
                merged.push(merge_chain(&chain));
            }
        }

        // Greedy nearest-pair linking between open chains and block rows.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ci, chain) in linkable.iter().enumerate() {
            let tail = chain.last().unwrap();
            for (ri, row) in block.iter().enumerate() {
                let d = ((tail.x - row.x).powi(2) + (tail.y - row.y).powi(2)).sqrt();
                if d <= radius {
                    pairs.push((d, ci, ri));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut chain_taken = vec![false; linkable.len()];
        let mut row_taken = vec![false; block.len()];
        let mut assignment: Vec<Option<usize>> = vec![None; block.len()];
        for (_, ci, ri) in pairs {
            if !chain_taken[ci] && !row_taken[ri] {
                chain_taken[ci] = true;
                row_taken[ri] = true;
                assignment[ri] = Some(ci);
            }
        }

        let mut next_open: Vec<Vec<LocRecord>> = Vec::new();
        for (ci, chain) in linkable.into_iter().enumerate() {
            if !chain_taken[ci] {
                merged.push(merge_chain(&chain));
            } else {
                next_open.push(chain);
            }
        }
        // Extend assigned chains (next_open preserved chain order among taken).
        let mut taken_iter_idx: Vec<usize> = Vec::new();
        for (ci, &t) in chain_taken.iter().enumerate() {
            if t {
                taken_iter_idx.push(ci);
            }
        }
        for (ri, row) in block.iter().enumerate() {
            match assignment[ri] {
                Some(ci) => {
                    let slot = taken_iter_idx.iter().position(|&c| c == ci).unwrap();
                    next_open[slot].push(*row);
                }
                None => next_open.push(vec![*row]),
            }
        }
        open = next_open;

        if frame.is_none() {
            break;
        }
        i = j;
    }
    for chain in open {
        merged.push(merge_chain(&chain));
    }
    merged.sort_by_key(|r| r.frame);
    merged
}

fn merge_chain(chain: &[LocRecord]) -> LocRecord {
    if chain.len() == 1 {
        return chain[0];
    }
    // Zero-sigma rows (e.g. ground truth) get a uniform huge weight, which
    // degrades gracefully to a plain mean.
    let inv_var = |s: f64| 1.0 / (s * s).max(1e-24);
    let mut photons = 0.0;
    let mut prob: f64 = 0.0;
    let mut wsum = [0.0f64; 3];
    let mut wpos = [0.0f64; 3];
    for r in chain {
        photons += r.photons;
        prob = prob.max(r.prob);
        for (ax, (v, s)) in [(r.x, r.sig_x), (r.y, r.sig_y), (r.z, r.sig_z)]
            .into_iter()
            .enumerate()
        {
            let w = inv_var(s);
            wsum[ax] += w;
            wpos[ax] += w * v;
        }
    }
    LocRecord {
        frame: chain[0].frame,
        x: wpos[0] / wsum[0],
        y: wpos[1] / wsum[1],
        z: wpos[2] / wsum[2],
        photons,
        prob,
        sig_x: wsum[0].powf(-0.5),
        sig_y: wsum[1].powf(-0.5),
        sig_z: wsum[2].powf(-0.5),
    }
}

/// Convenience: run NMS on one frame's maps and convert to table rows.
pub fn maps_to_localizations(maps: &OutputMaps, frame: u32, low: f64, high: f64) -> LocalizationTable {
    let det = nms_detect(&maps.p, maps.grid.width, maps.grid.height, low, high);
    maps_to_table(maps, &det, frame)
}

/// In-pixel offset helper shared with tests: offset of `v` within its pixel.
pub fn in_pixel_offset(v: f64, pixel_size: f64) -> f64 {
    GridSpec::new(1, 1, pixel_size).in_pixel_offset(v)
}
