//! Dense row-major tensor over a [`Real`] scalar.
//!
//! Ranks in practice: `[]` scalars, `[n]` vectors, `[m, n]` matrices, and
//! `[m, d, 3]` token sets of vector features. No views, no broadcasting
//! machinery; the tape ops that need broadcast semantics implement them
//! explicitly.

use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| F::from_f64_lossy(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Leading dimension, i.e. the batch/token axis.
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frob_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    /// Frobenius norm of the elementwise difference.
    pub fn distance(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>()
            .sqrt()
    }

    /// `|self - other|_F / max(|other|_F, floor)`.
    pub fn relative_error(&self, other: &Self, floor: F) -> F {
        self.distance(other) / other.frob_norm().max(floor)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: F) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn relative_error_floor() {
        let a = Tensor::<f64>::new(vec![2], vec![1e-15, 0.0]);
        let b = Tensor::<f64>::zeros(vec![2]);
        assert!(a.relative_error(&b, 1e-12) <= 1e-3);
    }
}
