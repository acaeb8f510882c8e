//! Dense `f32` tensors and the deterministic numerics the attention
//! interventions are built from.
//!
//! Two containers are used throughout the crate:
//!
//! - [`Matrix`]: a single image's `N × d` patch-by-channel block (or any
//!   other row-major 2-D array). All kernels in [`ops`] act on it.
//! - [`FeatureTensor`]: a batch of such blocks sharing a spatial grid,
//!   laid out `B × N × d` with `N = H · W`.
//!
//! Every reduction runs in index-ascending order so results are bitwise
//! reproducible across runs and machines.

pub mod io;
pub mod ops;

pub use ops::{
    adain, channel_stats, concat_rows, gram_l2, gram_matrix, multi_head_attention, scaled_dot_attention, softmax_rows,
    ChannelStats, ADAIN_EPS,
};

use crate::error::{Error, Result};

/// Row-major 2-D array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::InvalidShape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Precondition(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..end]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`, accumulated in ascending `k` order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { matmul_avx2(self, rhs, &mut out) };
            return Ok(out);
        }
        matmul_kernel(self, rhs, &mut out);
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f32 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| i / self.cols.max(1))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A batch of per-image `N × d` blocks over a shared `H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    batch: usize,
    grid: (usize, usize),
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(batch: usize, grid: (usize, usize), channels: usize, data: Vec<f32>) -> Result<Self> {
        let patches = grid.0 * grid.1;
        if data.len() != batch * patches * channels {
            return Err(Error::InvalidShape(format!(
                "{} values cannot fill a {batch}x{patches}x{channels} tensor",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "FeatureTensor::new",
                row: pos / channels.max(1),
            });
        }
        Ok(Self {
            batch,
            grid,
            channels,
            data,
        })
    }

    /// Stacks per-image blocks; every block must have `H · W` rows and the
    /// same channel count.
    pub fn from_images(grid: (usize, usize), images: &[Matrix]) -> Result<Self> {
        let patches = grid.0 * grid.1;
        let channels = images.first().map_or(0, Matrix::cols);
        let mut data = Vec::with_capacity(images.len() * patches * channels);
        for image in images {
            if image.rows() != patches || image.cols() != channels {
                return Err(Error::ShapeMismatch {
                    op: "FeatureTensor::from_images",
                    lhs: vec![patches, channels],
                    rhs: image.shape().to_vec(),
                });
            }
            data.extend_from_slice(image.data());
        }
        Self::new(images.len(), grid, channels, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `[B, H, W, d]`, the layout used on disk.
    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.grid.0, self.grid.1, self.channels]
    }

    pub fn image(&self, b: usize) -> Matrix {
        let len = self.patches() * self.channels;
        Matrix {
            rows: self.patches(),
            cols: self.channels,
            data: self.data[b * len..(b + 1) * len].to_vec(),
        }
    }

    pub fn images(&self) -> Vec<Matrix> {
        (0..self.batch).map(|b| self.image(b)).collect()
    }

    pub fn bits_eq(&self, other: &FeatureTensor) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// Wider registers, same operation order: bitwise identical to the baseline.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(lhs: &Matrix, rhs: &Matrix, out: &mut Matrix) {
    matmul_kernel(lhs, rhs, out);
}

#[inline(always)]
fn matmul_kernel(lhs: &Matrix, rhs: &Matrix, out: &mut Matrix) {
    let cols = rhs.cols;
    for r in 0..lhs.rows {
        let lhs_row = &lhs.data[r * lhs.cols..(r + 1) * lhs.cols];
        let out_row = &mut out.data[r * cols..(r + 1) * cols];
        for (rhs_row, &a) in rhs.data.chunks_exact(cols.max(1)).zip(lhs_row) {
            for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                *o += a * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatched_matmul_matches_baseline_kernel_bitwise() {
        let a = Matrix::new(37, 19, (0..37 * 19).map(|i| (i as f32 * 0.61).sin()).collect()).unwrap();
        let b = Matrix::new(19, 70, (0..19 * 70).map(|i| (i as f32 * 0.17).cos()).collect()).unwrap();
        let mut base = Matrix::zeros(37, 70);
        matmul_kernel(&a, &b, &mut base);
        assert!(a.matmul(&b).unwrap().bits_eq(&base));
    }

    #[test]
    fn select_and_concat_rows() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let s = m.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(m.select_rows(&[3]).is_err());
        let c = concat_rows(&[&s, &m]).unwrap();
        assert_eq!(c.rows(), 5);
        assert_eq!(c.row(4), &[5.0, 6.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(a.matmul(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn feature_tensor_invariants() {
        assert!(FeatureTensor::new(1, (2, 2), 3, vec![0.0; 11]).is_err());
        assert!(FeatureTensor::new(1, (1, 1), 1, vec![f32::NAN]).is_err());
        let a = Matrix::filled(4, 3, 1.0);
        let b = Matrix::filled(4, 3, 2.0);
        let t = FeatureTensor::from_images((2, 2), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.dims(), [2, 2, 2, 3]);
        assert_eq!(t.image(1), b);
        assert!(FeatureTensor::from_images((2, 2), &[Matrix::zeros(3, 3)]).is_err());
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = Matrix::filled(1, 1, 0.0);
        let b = Matrix::filled(1, 1, -0.0);
        assert_eq!(a, b);
        assert!(!a.bits_eq(&b));
    }
}
