//! Kernel matrices over the rows of a matrix.

use crate::error::{Error, Result};
use crate::numerics::matrix::{squared_distance, Matrix};

/// Gram matrix of a translation-invariant kernel together with its bandwidth.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub base: Matrix,
    pub bandwidth: f64,
}

/// Pairwise squared Euclidean distances between rows.
pub fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(x.row(i), x.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Pairwise L1 distances between rows.
pub fn manhattan_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).abs()).sum();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// `K[i][j] = exp(-‖x_i - x_j‖² / (2 σ²))`.
pub fn rbf_kernel(x: &Matrix, bandwidth: f64) -> Result<KernelMatrix> {
    rbf_from_squared(&squared_distances(x), bandwidth)
}

pub fn rbf_from_squared(sq: &Matrix, bandwidth: f64) -> Result<KernelMatrix> {
    check_bandwidth(bandwidth)?;
    let denom = 2.0 * bandwidth * bandwidth;
    Ok(KernelMatrix {
        base: sq.map(|d| (-d / denom).exp()),
        bandwidth,
    })
}

/// `K[i][j] = exp(-‖x_i - x_j‖₁ / σ)`.
pub fn laplace_from_manhattan(l1: &Matrix, bandwidth: f64) -> Result<KernelMatrix> {
    check_bandwidth(bandwidth)?;
    Ok(KernelMatrix {
        base: l1.map(|d| (-d / bandwidth).exp()),
        bandwidth,
    })
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if bandwidth > 0.0 && bandwidth.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidBandwidth(bandwidth))
    }
}

/// Median of the strictly upper-triangular entries of a distance matrix.
/// Returns `None` for fewer than two rows or when every distance is zero.
pub fn median_off_diagonal(distances: &Matrix) -> Option<f64> {
    let n = distances.rows();
    let mut vals: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            vals.push(distances[(i, j)]);
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let mid = vals.len() / 2;
    let med = if vals.len() % 2 == 0 {
        0.5 * (vals[mid - 1] + vals[mid])
    } else {
        vals[mid]
    };
    (med > 0.0).then_some(med)
}

/// Median pairwise Euclidean distance between rows of `x`.
pub fn median_heuristic(x: &Matrix) -> Option<f64> {
    median_off_diagonal(&squared_distances(x).map(f64::sqrt))
}
