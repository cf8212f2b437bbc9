use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;
use crate::error::{Error, Result};

/// How a freshly registered parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot uniform over `(fan_in, fan_out)` = `(rows, cols)`.
    Xavier,
    Zeros,
    Ones,
    /// `N(0, std^2)`, used for embedding tables.
    Normal(f64),
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.insert(name, Tensor::new(vec![rows, cols], data)?.with_grad())
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `grad` into the gradient buffer of parameter `id`.
    pub fn accumulate_grad(&mut self, id: usize, grad: &[f64]) {
        let t = &mut self.tensors[id];
        match &mut t.grad {
            Some(g) => super::kernels::add_into(g, grad),
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// Rounds every value to the nearest f32.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
