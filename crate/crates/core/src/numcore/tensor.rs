use rand::Rng;
use rand_distr::StandardNormal;

use super::{Scalar, TensorError};

/// Dense row-major n-dimensional array.
///
/// A shape of `[]` denotes a scalar holding one element. Every constructor
/// rejects non-finite data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Shape(format!("zero-sized dim in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor constructor".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for op outputs whose shape is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn scalar(v: S) -> Result<Self, TensorError> {
        Self::new(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Normal draws with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::lit(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable element access. Callers are responsible for keeping values finite;
    /// [`Tensor::check_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    #[allow(clippy::eq_op, clippy::assign_op_pattern)]
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        // v - v is 0 for finite v and NaN otherwise; eight lanes let this vectorize
        let mut acc = [S::zero(); 8];
        let mut chunks = self.data.chunks_exact(8);
        for c in &mut chunks {
            for (a, &v) in acc.iter_mut().zip(c) {
                *a = *a + (v - v);
            }
        }
        let tail = chunks.remainder().iter().fold(S::zero(), |a, &v| a + (v - v));
        if acc.iter().fold(tail, |a, &v| a + v) == S::zero() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(&[2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite(_))
        ));
        assert!(Tensor::<f64>::new(&[2], vec![1.0, f64::INFINITY]).is_err());
        let s = Tensor::<f64>::scalar(3.0).unwrap();
        assert_eq!(s.numel(), 1);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
