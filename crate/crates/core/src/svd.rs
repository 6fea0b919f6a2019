//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! This is the reference oracle for orthogonalization and the geometry
//! diagnostics, not a hot path. Rotations are applied in a fixed cyclic pair
//! order, so the result is deterministic for a given input.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, RowVector};

/// Largest `min(rows, cols)` accepted by [`svd_small`].
pub const MAX_SVD_DIM: usize = 1024;

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m x r` left singular vectors.
    pub u: Matrix,
    /// `r = min(m, n)` singular values, descending.
    pub sigma: RowVector,
    /// `n x r` right singular vectors.
    pub v: Matrix,
}

impl SvdResult {
    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        Matrix::from_fn(m, n, |i, j| {
            (0..r).fold(0.0, |acc, k| {
                acc + self.u.get(i, k) * self.sigma[k] * self.v.get(j, k)
            })
        })
    }

    /// The polar factor `U Vᵀ`.
    pub fn polar_factor(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        Matrix::from_fn(m, n, |i, j| {
            (0..r).fold(0.0, |acc, k| acc + self.u.get(i, k) * self.v.get(j, k))
        })
    }
}

/// Thin SVD of a dense matrix with `min(m, n) <= 1024`.
pub fn svd_small(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m.min(n) > MAX_SVD_DIM {
        return Err(Error::domain(
            "svd_small",
            format!("{m}x{n} exceeds the oracle size limit"),
        ));
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(a)?;
        Ok(SvdResult { u, sigma, v })
    } else {
        let (u, sigma, v) = jacobi_tall(&a.transpose())?;
        Ok(SvdResult { u: v, sigma, v: u })
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |acc, (&a, &b)| acc + a * b)
}

/// SVD of a matrix with `rows >= cols`; returns `(U, sigma, V)`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, RowVector, Matrix)> {
    let (m, n) = a.shape();
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 4.0 * f64::EPSILON * (m as f64).sqrt();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(
            "svd_small",
            format!("Jacobi sweeps did not converge for a {m}x{n} matrix"),
        ));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if norms.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(
            "svd_small",
            format!("non-finite singular value for a {m}x{n} matrix"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let negligible = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > negligible && s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            // rank-deficient direction: filled in below
            ucols.push(vec![0.0; m]);
            sigma.push(if s > 0.0 { s } else { 0.0 });
            pending.push(k);
        }
    }
    complete_basis(&mut ucols, &pending, m);

    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    Ok((u, RowVector::from(sigma), v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Replaces the columns listed in `pending` by unit vectors orthogonal to
/// every other column (Gram-Schmidt over the standard basis).
fn complete_basis(ucols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &k in pending {
        loop {
            assert!(candidate < m, "ran out of basis candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, col) in ucols.iter().enumerate() {
                    if j == k || (pending.contains(&j) && col.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                ucols[k] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn gram_residual(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().frobenius_norm()
    }

    fn check_invariants(a: &Matrix) {
        let svd = svd_small(a).unwrap();
        let r = a.rows().min(a.cols());
        assert_eq!(svd.sigma.len(), r);
        assert_eq!(svd.u.shape(), (a.rows(), r));
        assert_eq!(svd.v.shape(), (a.cols(), r));
        assert!(svd.sigma.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!(svd.sigma.iter().all(|&s| s >= 0.0));
        assert!(gram_residual(&svd.u) <= 1e-10, "U not orthonormal");
        assert!(gram_residual(&svd.v) <= 1e-10, "V not orthonormal");
        let resid = svd.reconstruct().sub(a).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * a.frobenius_norm().max(1.0), "residual {resid}");
    }

    #[test]
    fn identity_and_diagonal() {
        let svd = svd_small(&Matrix::identity(4)).unwrap();
        assert_eq!(svd.sigma.as_slice(), &[1.0; 4]);
        let svd = svd_small(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(svd.sigma.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn seeded_gaussian_reconstructs() {
        let a = SeededRng::new(11).gaussian_matrix(5, 3, 1.0);
        let svd = svd_small(&a).unwrap();
        assert!(svd.reconstruct().sub(&a).unwrap().frobenius_norm() <= 1e-9);
    }

    #[test]
    fn invariants_over_shapes() {
        for (seed, (m, n)) in [(1, 1), (3, 5), (5, 3), (8, 8), (64, 16)].into_iter().enumerate() {
            for rep in 0..3u64 {
                let a = SeededRng::with_stream(seed as u64, rep).gaussian_matrix(m, n, 1.5);
                check_invariants(&a);
            }
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        let mut rng = SeededRng::new(4);
        let x = rng.gaussian_matrix(6, 1, 1.0);
        let y = rng.gaussian_matrix(1, 4, 1.0);
        let rank1 = x.matmul(&y).unwrap();
        check_invariants(&rank1);
        let svd = svd_small(&rank1).unwrap();
        assert!(svd.sigma[1] < 1e-12);
        check_invariants(&Matrix::zeros(3, 2));
    }

    #[test]
    fn deterministic() {
        let a = SeededRng::new(9).gaussian_matrix(7, 4, 1.0);
        let s1 = svd_small(&a).unwrap();
        let s2 = svd_small(&a).unwrap();
        assert_eq!(s1.u, s2.u);
        assert_eq!(s1.sigma, s2.sigma);
    }
}
