//! Dense row-major `f64` matrices and the handful of kernels the optimizers
//! need.
//!
//! Every reduction walks its input in a fixed order (row-major, left to right)
//! so repeated calls on the same input are bit-identical. The sharded simulator
//! relies on this to compare against single-device runs.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the binary matrix format.
pub const MATRIX_MAGIC: &[u8; 4] = b"NMK1";

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// One real value per matrix row (per neuron).
#[derive(Clone, Debug, PartialEq)]
pub struct RowVector(Vec<f64>);

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                "Matrix::new",
                format!("non-finite entry {} at index {pos}", data[pos]),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_raw(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// `self * other`, i-k-j loop order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Sum of squared entries in row-major order.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    /// L2 norm of every row.
    pub fn row_norms(&self) -> RowVector {
        RowVector(
            (0..self.rows)
                .map(|i| self.row(i).iter().fold(0.0, |acc, &x| acc + x * x).sqrt())
                .collect(),
        )
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Stacks row blocks that share a column count.
    pub fn concat_rows(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for (k, b) in blocks.iter().enumerate() {
            if b.cols != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("block {k} has {} cols, expected {cols}", b.cols),
                ));
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    /// Writes the `NMK1` binary encoding: magic, `u32` rows, `u32` cols, then
    /// row-major little-endian `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Matrix> {
        let fmt_err = |detail: String| Error::Format {
            what: "NMK1 matrix",
            detail,
        };
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|e| fmt_err(format!("short header: {e}")))?;
        if &header[..4] != MATRIX_MAGIC {
            return Err(fmt_err(format!("bad magic {:?}", &header[..4])));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| fmt_err(format!("read failed: {e}")))?;
        if bytes.len() != rows * cols * 8 {
            return Err(fmt_err(format!(
                "expected {} payload bytes for {rows}x{cols}, found {}",
                rows * cols * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Matrix::read_from(std::io::BufReader::new(file))
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl RowVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                "RowVector::new",
                format!("non-finite entry at index {pos}"),
            ));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }
}

impl From<Vec<f64>> for RowVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for RowVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Matrix product with a fixed i-k-j summation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `a * aᵀ` without materializing the transpose.
pub(crate) fn gram_rows(a: &Matrix) -> Matrix {
    let m = a.rows;
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        let ri = a.row(i);
        for j in 0..m {
            let rj = a.row(j);
            out.data[i * m + j] = ri.iter().zip(rj).fold(0.0, |acc, (&x, &y)| acc + x * y);
        }
    }
    out
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.sum_sq().sqrt()
}

/// Mean of squared entries along each row: `(1/n) Σ_j a[i,j]²`.
pub fn row_mean_sq(a: &Matrix) -> RowVector {
    let n = a.cols as f64;
    RowVector(
        (0..a.rows)
            .map(|i| a.row(i).iter().fold(0.0, |acc, &x| acc + x * x) / n)
            .collect(),
    )
}

/// `out[i,j] = a[i,j] / (sqrt(d[i]) + eps)`.
pub fn div_rows(a: &Matrix, d: &RowVector, eps: f64) -> Result<Matrix> {
    if d.len() != a.rows {
        return Err(Error::shape(
            "div_rows",
            format!("{} divisors for {} rows", d.len(), a.rows),
        ));
    }
    let mut out = a.clone();
    for i in 0..a.rows {
        let denom = d.0[i].sqrt() + eps;
        for x in out.row_mut(i) {
            *x /= denom;
        }
    }
    Ok(out)
}
