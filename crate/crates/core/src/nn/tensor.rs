use serde::{Deserialize, Serialize};

/// Dense row-major multi-dimensional array of `f64`.
///
/// The invariant `product(shape) == data.len()` is enforced by every
/// constructor; indexing helpers are provided for ranks used by the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterpret the buffer under a new shape of equal total size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve element count"
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row `(c, i)` of a rank-3 `[C, H, W]` tensor as a contiguous slice.
    pub fn row3(&self, c: usize, i: usize) -> &[f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && i < h);
        let start = (c * h + i) * w;
        &self.data[start..start + w]
    }

    pub fn row3_mut(&mut self, c: usize, i: usize) -> &mut [f64] {
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(c < self.shape[0] && i < h);
        let start = (c * h + i) * w;
        &mut self.data[start..start + w]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    /// Row `m` of a rank-2 `[M, N]` tensor.
    pub fn row2(&self, m: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[m * n..(m + 1) * n]
    }

    pub fn row2_mut(&mut self, m: usize) -> &mut [f64] {
        let n = self.shape[1];
        &mut self.data[m * n..(m + 1) * n]
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// In-place scalar multiply.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
