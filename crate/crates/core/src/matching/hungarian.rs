//! Minimum-cost assignment of every ground truth to a distinct prediction.
//!
//! Shortest augmenting paths with row/column potentials, O(G^2 N). Ground
//! truths play the role of rows internally so the rectangular case needs no
//! padding. Scans use strict comparisons, so ties go to the lowest index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows` predictions by `cols` ground truths, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} entries for a {rows}x{cols} cost matrix", data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols.max(1), k % cols.max(1))).collect();
        CostMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Cost matrix with rows reordered: row `i` of the result is row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> CostMatrix {
        CostMatrix::from_fn(order.len(), self.cols, |i, j| self.get(order[i], j))
    }
}

/// `(prediction, ground truth)` pairs, one per ground truth, sorted by ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction matched to each ground truth.
    pub fn prediction_for_gt(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }

    /// Ground truth matched to each of `n` predictions, if any.
    pub fn gt_for_prediction(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (cost.rows, cost.cols);
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry ({}, {}) is {}", k / n, k % n, cost.data[k])));
    }
    if m < n {
        return Err(Error::Contract(format!("{m} predictions cannot cover {n} ground truths")));
    }
    if n == 0 {
        return Ok(Assignment::default());
    }
    // a(i, j): ground truth i (1-based) against prediction j (1-based)
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
    Ok(Assignment { pairs, total_cost })
}
