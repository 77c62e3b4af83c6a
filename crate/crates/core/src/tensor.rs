use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::rng::StdRng;

/// A dense row-major f64 tensor.
///
/// Most of the crate treats tensors as matrices: a tensor with more than two
/// dims (e.g. an `[R, R, 3]` image) is viewed as `rows = product of leading
/// dims`, `cols = last dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dim in {dims:?}"));
        }
        if numel != data.len() {
            return Err(shape_err!(
                "dims {dims:?} imply {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal entries with the given standard deviation.
    pub fn randn(dims: Vec<usize>, std: f64, rng: &mut StdRng) -> Self {
        let numel = dims.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view: all leading dims collapsed into rows, last dim is cols.
    pub fn rows(&self) -> usize {
        if self.dims.len() <= 1 {
            1
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    /// Accumulate into the gradient store, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
