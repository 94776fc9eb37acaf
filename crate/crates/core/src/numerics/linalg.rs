//! SVD, centering and orthogonal Procrustes.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Thin singular value decomposition `a = u · diag(s) · vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub s: Vec<f64>,
    /// `k x n` with orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_unchecked(&self.vt)
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular vectors are sign-normalized so that the largest-magnitude entry of
/// every column of `u` is positive.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::input("svd of a non-finite matrix"));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::shape("svd of an empty matrix"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        // a = (v s uᵀ)ᵀ: swap the roles and renormalize signs on the new u.
        let mut out = Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        normalize_signs(&mut out);
        return Ok(out);
    }
    Ok(svd_tall(a))
}

fn svd_tall(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    // Work on columns: store A and V column-major for cache-friendly rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * f64::EPSILON * (m.max(n) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > tiny && sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(complete_basis(&u_cols, m));
            s.push(0.0);
        }
        for (i, vi) in v[j].iter().enumerate() {
            vt[(k, i)] = *vi;
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let mut out = Svd { u, s, vt };
    normalize_signs(&mut out);
    out
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// A unit vector orthogonal to every vector in `basis` (Gram-Schmidt on the
/// standard basis).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bi) in cand.iter_mut().zip(b) {
                    *c -= proj * bi;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = Some(cand);
        }
        if best_norm > 0.7 {
            break;
        }
    }
    let cand = best.unwrap_or_else(|| vec![0.0; m]);
    cand.iter().map(|c| c / best_norm.max(f64::MIN_POSITIVE)).collect()
}

fn normalize_signs(svd: &mut Svd) {
    let (m, k) = svd.u.shape();
    for j in 0..k {
        let mut pivot = 0.0_f64;
        for i in 0..m {
            let v = svd.u[(i, j)];
            if v.abs() > pivot.abs() + 1e-14 {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            for i in 0..m {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for x in svd.vt.row_mut(j) {
                *x = -*x;
            }
        }
    }
}

/// Which side(s) the centering matrix `H = I - 11ᵀ/n` is applied on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centering {
    /// `H · k`
    Left,
    /// `H · k · H`
    TwoSided,
}

/// Centers a square matrix with `H = I - 11ᵀ/n`.
pub fn center(k: &Matrix, mode: Centering) -> Result<Matrix> {
    if !k.is_square() {
        return Err(Error::shape(format!(
            "centering needs a square matrix, got {:?}",
            k.shape()
        )));
    }
    let left = center_columns(k);
    Ok(match mode {
        Centering::Left => left,
        Centering::TwoSided => {
            let mut out = left;
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                row.iter_mut().for_each(|v| *v -= mean);
            }
            out
        }
    })
}

/// `H · m` for any `n x d` matrix: subtracts each column's mean.
pub fn center_columns(m: &Matrix) -> Matrix {
    let means = m.column_means();
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (v, mu) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    out
}

/// Orthogonal map aligning one centered set onto another.
#[derive(Debug, Clone)]
pub struct AlignmentSolution {
    pub rotation: Matrix,
    /// `‖g - f · rotation‖_F`
    pub residual: f64,
}

/// Solves `min_R ‖g - f R‖_F` over orthogonal `R` via the SVD of `fᵀ g`.
pub fn procrustes(g_centered: &Matrix, f_centered: &Matrix) -> Result<AlignmentSolution> {
    if g_centered.shape() != f_centered.shape() {
        return Err(Error::shape(format!(
            "procrustes of {:?} onto {:?}",
            f_centered.shape(),
            g_centered.shape()
        )));
    }
    if g_centered.cols() == 0 || g_centered.rows() == 0 {
        return Err(Error::shape("procrustes needs at least one column"));
    }
    let cross = f_centered.tmatmul(g_centered);
    let dec = svd(&cross)?;
    let rotation = dec.u.matmul_unchecked(&dec.vt);
    let fitted = f_centered.matmul_unchecked(&rotation);
    let residual = g_centered.sub(&fitted)?.frobenius_norm();
    Ok(AlignmentSolution { rotation, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn orthonormal_cols(m: &Matrix) -> f64 {
        m.tmatmul(m).max_abs_diff(&Matrix::identity(m.cols()))
    }

    fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1.0)
    }

    #[test]
    fn svd_identity() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
        assert!(d.u.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        assert!(d.vt.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn svd_diagonal() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14 && (d.s[1] - 1.0).abs() < 1e-14);
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(svd(&a).unwrap().s, vec![3.0, 1.0]);
    }

    #[test]
    fn svd_reconstructs_random_tall_and_wide() {
        for (r, c, seed) in [(4, 3, 1), (3, 4, 2), (7, 7, 3), (1, 5, 4), (6, 1, 5)] {
            let a = gaussian(r, c, seed);
            let d = svd(&a).unwrap();
            assert!(rel_error(&d.reconstruct(), &a) <= 1e-10, "{r}x{c}");
            assert!(orthonormal_cols(&d.u) < 1e-10);
            assert!(orthonormal_cols(&d.vt.transpose()) < 1e-10);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let mut a = gaussian(5, 3, 9);
        for i in 0..5 {
            a[(i, 2)] = a[(i, 0)] * 2.0;
        }
        let d = svd(&a).unwrap();
        assert!(d.s[2] < 1e-12);
        assert!(orthonormal_cols(&d.u) < 1e-10);
        assert!(rel_error(&d.reconstruct(), &a) <= 1e-10);
        let zero = svd(&Matrix::zeros(3, 2)).unwrap();
        assert!(orthonormal_cols(&zero.u) < 1e-12);
    }

    #[test]
    fn svd_largest_entry_of_u_columns_positive() {
        let d = svd(&gaussian(6, 4, 21)).unwrap();
        for j in 0..4 {
            let col = d.u.column(j);
            let big = col
                .iter()
                .cloned()
                .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a.as_mut_slice()[1] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn centering_ones_gives_zero() {
        let k = Matrix::filled(4, 4, 1.0);
        for mode in [Centering::Left, Centering::TwoSided] {
            assert!(center(&k, mode).unwrap().max_abs_diff(&Matrix::zeros(4, 4)) < 1e-15);
        }
    }

    #[test]
    fn centering_is_idempotent_on_centered_input() {
        let raw = gaussian(5, 5, 4);
        let c = center(&raw, Centering::TwoSided).unwrap();
        for mode in [Centering::Left, Centering::TwoSided] {
            assert!(center(&c, mode).unwrap().max_abs_diff(&c) < 1e-12);
        }
    }

    #[test]
    fn centering_matches_explicit_product() {
        let k = Matrix::from_rows(&[[2.0, -1.0, 0.5], [0.0, 3.0, 1.0], [4.0, 1.0, -2.0]]).unwrap();
        let h = Matrix::from_fn(3, 3, |i, j| if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 });
        let hk = h.matmul(&k).unwrap();
        let hkh = hk.matmul(&h).unwrap();
        assert!(center(&k, Centering::Left).unwrap().max_abs_diff(&hk) < 1e-12);
        assert!(center(&k, Centering::TwoSided).unwrap().max_abs_diff(&hkh) < 1e-12);
        let left = center(&k, Centering::Left).unwrap();
        assert!(left.column_means().iter().all(|m| m.abs() < 1e-12));
        let both = center(&k, Centering::TwoSided).unwrap();
        assert!(both.transpose().column_means().iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn centering_rejects_non_square() {
        assert!(matches!(
            center(&Matrix::zeros(2, 3), Centering::Left),
            Err(Error::InvalidShape(_))
        ));
    }

    fn rotation2(theta: f64) -> Matrix {
        Matrix::from_rows(&[[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]]).unwrap()
    }

    #[test]
    fn procrustes_self_alignment() {
        let g = center_columns(&gaussian(20, 3, 7));
        let sol = procrustes(&g, &g).unwrap();
        assert!(sol.residual < 1e-10);
        assert!(sol.rotation.max_abs_diff(&Matrix::identity(3)) < 1e-8);
    }

    #[test]
    fn procrustes_recovers_planted_rotation() {
        let g = center_columns(&gaussian(30, 2, 8));
        let q = rotation2(0.7);
        let f = g.matmul(&q).unwrap();
        let sol = procrustes(&g, &f).unwrap();
        assert!(sol.residual <= 1e-8);
        assert!(sol.rotation.max_abs_diff(&q.transpose()) < 1e-8);
        let rtr = sol.rotation.tmatmul(&sol.rotation);
        assert!(rtr.max_abs_diff(&Matrix::identity(2)) < 1e-8);
    }

    #[test]
    fn procrustes_independent_sets_leave_residual() {
        let g = center_columns(&gaussian(50, 4, 10));
        let f = center_columns(&gaussian(50, 4, 11));
        let sol = procrustes(&g, &f).unwrap();
        assert!(sol.residual > 0.1 * g.frobenius_norm());
    }

    #[test]
    fn procrustes_shape_mismatch() {
        assert!(matches!(
            procrustes(&Matrix::zeros(3, 2), &Matrix::zeros(3, 3)),
            Err(Error::InvalidShape(_))
        ));
    }
}
