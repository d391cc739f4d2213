//! Dense f64 tensors, a per-sample reverse-mode tape, and the Adam optimizer.
//!
//! Everything the model needs lives here: affine maps, the gating
//! nonlinearities, concatenation and pooling, sparse neighbourhood mixing and
//! a masked softmax likelihood. Tensors are at most rank two; a rank-one
//! tensor of length `k` behaves like a `1 x k` matrix wherever rows matter.

mod optim;
mod tape;

pub use optim::{Adam, AdamConfig};
pub use tape::{BoundAffine, Gradients, MixEntry, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of rank zero, one or two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.len() > 2 {
            return Err(TensorError::Shape {
                op: "tensor",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    expected: vec![cols],
                    found: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: scalars are `1 x 1`, vectors `1 x k`.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [k] => (1, *k),
            [r, c] => (*r, *c),
            _ => unreachable!("rank is capped at two"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rounds every value through `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Affine map `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineBlock {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2();
        if weight.shape().len() != 2 || bias.shape() != [out] {
            return Err(TensorError::Shape {
                op: "affine_block",
                expected: vec![out],
                found: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Uniform Glorot initialisation with zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor {
                shape: vec![out_dim, in_dim],
                data,
            },
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims2().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims2().0
    }

    /// Plain (untaped) evaluation on one input vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(TensorError::Shape {
                op: "affine",
                expected: vec![self.in_dim()],
                found: vec![x.len()],
            });
        }
        let w = self.weight.data();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| {
                b + w[o * x.len()..(o + 1) * x.len()]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect())
    }
}

/// A collection of trainable tensors with a fixed traversal order.
///
/// `visit`, `visit_mut` and `bind` must walk the tensors in the same order:
/// gradients, optimizer moments and checkpoints are all aligned to it.
pub trait Parameters {
    type Bound;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    /// Consumes one tape variable per tensor, in traversal order.
    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Self::Bound;

    /// Registers every tensor on the tape as a differentiable leaf.
    fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Self::Bound {
        let mut vars = Vec::new();
        self.visit(&mut |t| vars.push(tape.param(t)));
        self.bind_from(&mut vars.into_iter())
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |t| ok &= t.is_finite());
        ok
    }
}

impl Parameters for AffineBlock {
    type Bound = BoundAffine;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundAffine {
        BoundAffine {
            weight: vars.next().expect("weight var"),
            bias: vars.next().expect("bias var"),
        }
    }
}

impl Parameters for Tensor {
    type Bound = Var;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self);
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Var {
        vars.next().expect("tensor var")
    }
}

/// Inverted-dropout keep mask: zeros for dropped units, `1/(1-rate)` for kept
/// ones. Deterministic in `seed`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidRate(rate));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}
