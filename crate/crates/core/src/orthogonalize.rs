//! Newton-Schulz orthogonalization and the exact polar factor it approximates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gram_rows, Matrix};
use crate::svd::svd_small;

/// Quintic Newton-Schulz coefficients and iteration count.
///
/// Each iteration maps a singular value `x` of the normalized iterate to
/// `a x + b x^3 + c x^5`. The default coefficients are the widely used
/// five-step quintic that pushes every singular value of a Frobenius-normalized
/// matrix into roughly `[0.68, 1.14]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsConfig {
    pub coeff_a: f64,
    pub coeff_b: f64,
    pub coeff_c: f64,
    pub iterations: usize,
    /// Inputs with Frobenius norm at or below this value map to zero.
    pub zero_guard: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self {
            coeff_a: 3.4445,
            coeff_b: -4.7750,
            coeff_c: 2.0315,
            iterations: 5,
            zero_guard: 0.0,
        }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("ns.iterations", "must be at least 1"));
        }
        if !(self.zero_guard >= 0.0) || !self.zero_guard.is_finite() {
            return Err(Error::config("ns.zero_guard", "must be finite and >= 0"));
        }
        for (field, v) in [
            ("ns.coeff_a", self.coeff_a),
            ("ns.coeff_b", self.coeff_b),
            ("ns.coeff_c", self.coeff_c),
        ] {
            if !v.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        Ok(())
    }

    /// The scalar map one iteration applies to each singular value.
    pub fn poly(&self, x: f64) -> f64 {
        let x2 = x * x;
        x * (self.coeff_a + x2 * (self.coeff_b + self.coeff_c * x2))
    }

    /// `poly` composed `iterations` times.
    pub fn poly_iterated(&self, mut x: f64) -> f64 {
        for _ in 0..self.iterations {
            x = self.poly(x);
        }
        x
    }
}

/// Approximate orthogonalization of `m` by quintic Newton-Schulz iteration.
///
/// Starts from `m / ‖m‖_F`. Tall inputs are transposed first so the Gram
/// product is always over the smaller dimension, which makes
/// `ns5(mᵀ) == ns5(m)ᵀ` exact for non-square inputs.
pub fn ns5(m: &Matrix, cfg: &NsConfig) -> Result<Matrix> {
    let transposed = m.rows() > m.cols();
    let oriented = if transposed { m.transpose() } else { m.clone() };
    let norm = oriented.frobenius_norm();
    if norm <= cfg.zero_guard {
        return Ok(Matrix::zeros(m.rows(), m.cols()));
    }
    let mut x = oriented.map(|v| v / norm);
    for k in 1..=cfg.iterations {
        let gram = gram_rows(&x);
        let gram_sq = gram.matmul(&gram)?;
        let poly = gram
            .zip_with(&gram_sq, "ns5", |g, g2| cfg.coeff_b * g + cfg.coeff_c * g2)?;
        let px = poly.matmul(&x)?;
        x = x.zip_with(&px, "ns5", |xi, pi| cfg.coeff_a * xi + pi)?;
        if !x.all_finite() {
            return Err(Error::numeric(
                "ns5",
                format!("non-finite iterate at iteration {k}"),
            ));
        }
    }
    Ok(if transposed { x.transpose() } else { x })
}

/// The exact polar factor `U Vᵀ` of `m`, the closest semi-orthogonal matrix in
/// Frobenius norm.
pub fn polar_exact(m: &Matrix) -> Result<Matrix> {
    if m.is_zero() {
        return Err(Error::domain(
            "polar_exact",
            "polar factor of a zero matrix is undefined",
        ));
    }
    Ok(svd_small(m)?.polar_factor())
}
