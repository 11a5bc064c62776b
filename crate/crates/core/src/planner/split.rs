//! Capacity-proportional splitting of layers, data and tensors inside one
//! first-level group.

use crate::costmodel::{LayerRange, SubStage, Tile};
use crate::error::{Error, Result};

/// Splits `total` items into parts proportional to `weights` by largest
/// remainder (ties to the lower index), then moves items from the largest
/// parts until every part has at least `min_each`.
pub fn largest_remainder(total: usize, weights: &[f64], min_each: usize) -> Result<Vec<usize>> {
    let k = weights.len();
    if k == 0 {
        return Err(Error::InfeasibleSplit("nothing to split into".into()));
    }
    if total < min_each * k {
        return Err(Error::InfeasibleSplit(format!(
            "{total} items cannot give {k} parts at least {min_each} each"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InfeasibleSplit(format!("weights must be non-negative with a positive sum: {weights:?}")));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    while let Some(short) = (0..k).find(|&i| counts[i] < min_each) {
        let donor = (0..k)
            .filter(|&i| counts[i] > min_each)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("total >= min_each * k leaves a donor");
        counts[donor] -= 1;
        counts[short] += 1;
    }
    Ok(counts)
}

/// Consecutive layer sub-ranges, one per SG, in SG order.
pub fn split_asymmetric_pp(layers: LayerRange, sg_caps: &[f64]) -> Result<Vec<SubStage>> {
    if sg_caps.len() > layers.len() {
        return Err(Error::InfeasibleSplit(format!(
            "{} second-level groups but only {} layers",
            sg_caps.len(),
            layers.len()
        )));
    }
    let counts = largest_remainder(layers.len(), sg_caps, 1)?;
    let mut start = layers.start;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(sg, c)| {
            let r = LayerRange::new(start, start + c);
            start += c;
            SubStage { sg, layers: r }
        })
        .collect())
}

/// Data fractions proportional to unit capacities.
pub fn split_asymmetric_dp(caps: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = caps.iter().sum();
    if caps.is_empty() || !(sum > 0.0) || caps.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::InfeasibleSplit(format!("cannot split data over capacities {caps:?}")));
    }
    Ok(caps.iter().map(|c| c / sum).collect())
}

/// Whole-sample version of [`split_asymmetric_dp`] for a batch of `samples`.
pub fn split_samples(samples: u32, caps: &[f64]) -> Result<Vec<u32>> {
    Ok(largest_remainder(samples as usize, caps, 0)?
        .into_iter()
        .map(|c| c as u32)
        .collect())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Row and column factors when `caps`, laid out column-major on an
/// `rows x cols` grid, form a rank-1 matrix.
fn rank_one(caps: &[f64], rows: usize, cols: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let at = |i: usize, j: usize| caps[j * rows + i];
    let row: Vec<f64> = (0..rows).map(|i| at(i, 0)).collect();
    let col: Vec<f64> = (0..cols).map(|j| at(0, j) / at(0, 0)).collect();
    for i in 0..rows {
        for j in 0..cols {
            if !close(at(i, j), row[i] * col[j]) {
                return None;
            }
        }
    }
    Some((row, col))
}

/// Tiles of a `shape = [b, t]` tensor per unit, where unit `k` sits at grid
/// cell `(k mod R, k div R)` and the tile there is
/// `[b * row_i / sum(row), t * col_j / sum(col)]`.
///
/// `units` pairs an identifier (stored as [`Tile::unit`]) with a capacity.
/// The given order is tried first, then ascending capacity.
pub fn split_asymmetric_tp_dp(units: &[(usize, f64)], shape: [f64; 2]) -> Result<([usize; 2], Vec<Tile>)> {
    let n = units.len();
    let mut orders = vec![units.to_vec()];
    let mut sorted = units.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    if sorted != units {
        orders.push(sorted);
    }
    if units.iter().all(|u| u.1 > 0.0 && u.1.is_finite()) {
        for order in &orders {
            let caps: Vec<f64> = order.iter().map(|u| u.1).collect();
            for rows in 2..=n / 2 {
                if n % rows != 0 {
                    continue;
                }
                let cols = n / rows;
                let Some((row, col)) = rank_one(&caps, rows, cols) else {
                    continue;
                };
                let rsum: f64 = row.iter().sum();
                let csum: f64 = col.iter().sum();
                let mut roff = vec![0.0; rows];
                for i in 1..rows {
                    roff[i] = roff[i - 1] + shape[0] * row[i - 1] / rsum;
                }
                let mut coff = vec![0.0; cols];
                for j in 1..cols {
                    coff[j] = coff[j - 1] + shape[1] * col[j - 1] / csum;
                }
                let tiles = order
                    .iter()
                    .enumerate()
                    .map(|(k, u)| {
                        let (i, j) = (k % rows, k / rows);
                        Tile {
                            unit: u.0,
                            grid_row: i,
                            grid_col: j,
                            offset: [roff[i], coff[j]],
                            extent: [shape[0] * row[i] / rsum, shape[1] * col[j] / csum],
                        }
                    })
                    .collect();
                return Ok(([rows, cols], tiles));
            }
        }
    }
    let min = units.iter().map(|u| u.1).fold(f64::INFINITY, f64::min);
    Err(Error::Factorization {
        ratios: units.iter().map(|u| u.1 / min).collect(),
    })
}
