//! Dense f64 tensors, a tape-based reverse-mode autodiff graph, parameter
//! storage and the Adam optimizer.

mod batch;
mod graph;
mod kernels;
mod optim;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batch::{set_grads, weighted_grads};
pub use graph::{check_partition, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Init, ParameterStore};

use crate::error::{Error, Result};

/// Scores at or below this value are treated as masked out by softmax.
pub const MASK_VALUE: f64 = f64::MIN;

pub fn is_masked(x: f64) -> bool {
    x <= MASK_VALUE
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view; vectors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        let (r, _) = self.dims2();
        (0..r).map(|i| self.row(i).to_vec()).collect()
    }
}

/// Sinusoidal position table: `PE(p, 2i) = sin(p / 10000^(2i/d))`,
/// `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_pe(length: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width must be even, got {d}")));
    }
    if length == 0 {
        return Err(Error::Config("positional encoding length must be positive".into()));
    }
    let mut data = vec![0.0; length * d];
    for pos in 0..length {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, d], data)
}

/// Inverted dropout on a plain tensor.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    check_dropout_rate(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let data = x
        .data
        .iter()
        .map(|&v| if rng.random::<f64>() < p { 0.0 } else { v * scale })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

pub(crate) fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Keeps the `min(k, len)` largest entries of every row and replaces the rest
/// with [`MASK_VALUE`]. Ties at the cutoff keep the lowest column index.
pub fn topk_mask(scores: &Tensor, k: usize) -> Tensor {
    let (r, c) = scores.dims2();
    let mut out = scores.clone();
    out.grad = None;
    for i in 0..r {
        let keep = topk_keep(&scores.data[i * c..(i + 1) * c], k);
        for (j, kept) in keep.into_iter().enumerate() {
            if !kept {
                out.data[i * c + j] = MASK_VALUE;
            }
        }
    }
    out
}

/// Boolean keep-mask of the `min(k, len)` largest entries of `row`.
pub fn topk_keep(row: &[f64], k: usize) -> Vec<bool> {
    let mut keep = vec![false; row.len()];
    if k >= row.len() {
        keep.iter_mut().for_each(|b| *b = true);
        return keep;
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for &j in order.iter().take(k) {
        keep[j] = true;
    }
    keep
}
