use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major `f32` array.
///
/// A tensor is a plain value; gradient bookkeeping (`requires_grad`, the
/// accumulated gradient) lives on the [`Graph`](crate::graph::Graph) node
/// that wraps it. Scalars have shape `[1]`; zero-sized dimensions are
/// rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("invalid shape");
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("invalid shape");
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.uniform_f32(-bound, bound))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::dim(format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dim(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::dim(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!("invalid shape {shape:?}: dimensions must be >= 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(matches!(Tensor::new([2, 2], vec![0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(Tensor::new([2, 0], vec![]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![1.0]).is_err());
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::from_fn([2, 3], |i| i as f32).reshape([3, 2]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(t.reshape([4]).is_err());
    }

    #[test]
    fn bitwise_eq_distinguishes_signed_zero() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(-0.0);
        assert_eq!(a, b);
        assert!(!a.bitwise_eq(&b));
    }
}
