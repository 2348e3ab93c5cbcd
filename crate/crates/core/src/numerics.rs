//! Dense f64 tensors and a counter-based random number generator.
//!
//! Everything downstream (latents, errors, network weights) is carried in
//! [`Tensor`]. Randomness is always an explicit [`RngState`] value so that two
//! runs with the same seeds draw the same numbers in the same order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense tensor of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "tensor shape must be non-empty with positive dims, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "{what}: non-finite entry {} at index {pos}",
            data[pos]
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor data")?;
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor whose data the caller guarantees to be finite and sized.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: a tensor has at least one element.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, other: &Tensor, alpha: f64) -> Result<Tensor> {
        self.zip_with(other, "add_scaled", |a, b| a + alpha * b)
    }

    /// `alpha * self + beta * other`.
    pub fn lincomb(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        self.zip_with(other, "lincomb", |a, b| alpha * a + beta * b)
    }

    pub fn scale(&self, alpha: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&a| alpha * a).collect();
        check_finite(&data, "scale")?;
        Ok(Tensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts_unchecked(shape, self.data))
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || i >= self.shape[0] {
            return Err(Error::invalid(format!(
                "row {i} out of range for shape {:?}",
                self.shape
            )));
        }
        let w = self.shape[1];
        Ok(Tensor::from_parts_unchecked(
            vec![w],
            self.data[i * w..(i + 1) * w].to_vec(),
        ))
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }
}

/// Euclidean norm of `a - b`.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "l2_distance")?;
    Ok(squared_distance(a.data(), b.data()).sqrt())
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "mse")?;
    Ok(squared_distance(a.data(), b.data()) / a.len() as f64)
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Counter-based generator state: a seed, a stream id, and a position.
///
/// Backed by ChaCha8. The position counts 32-bit words consumed, so restoring
/// `(seed, stream, counter)` resumes the exact same sequence on any platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Plain-value capture of an [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub counter: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.rng.get_stream(),
            counter: self.rng.get_word_pos(),
        }
    }

    pub fn restore(snap: RngSnapshot) -> Self {
        let mut state = Self::stream(snap.seed, snap.stream);
        state.rng.set_word_pos(snap.counter);
        state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// True with probability `p` (exactly never for 0, always for 1).
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Tensor of i.i.d. standard-normal draws.
pub fn gaussian_sample(shape: &[usize], rng: &mut RngState) -> Result<Tensor> {
    let n = check_shape(shape)?;
    let data = (0..n).map(|_| rng.standard_normal()).collect();
    Ok(Tensor::from_parts_unchecked(shape.to_vec(), data))
}
