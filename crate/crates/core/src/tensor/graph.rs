//! Tape-based reverse-mode differentiation over 2-D f64 matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Parameter nodes borrow their values from a
//! [`ParameterStore`] instead of copying them.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{add_into, mm_acc, mm_nt_acc, mm_tn_acc};
use super::{check_dropout_rate, is_masked, ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    GroupSoftmax { x: Var, groups: Vec<(usize, usize)> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SegmentMaxPool { x: Var, argmax: Vec<usize> },
    ExpandCols(Var, Vec<(usize, usize)>),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParameterStore>,
    param_vars: HashMap<usize, Var>,
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(params: &'p ParameterStore) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || rows * cols == data.len());
        self.nodes.push(Node { rows, cols, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Adds a tensor as a leaf. It receives a gradient when `requires_grad` is set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("{rows}x{cols} constant with {} values", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Leaf for parameter `id` of the attached store. Repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store attached");
        let (r, c) = store.get(id).dims2();
        let v = self.push(r, c, Vec::new(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let store = self.params.ok_or_else(|| Error::State("graph has no parameter store".into()))?;
        let id = store.id(name).ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("store attached").get(id).data(),
            _ => &self.nodes[v.0].data,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shapes are consistent")
    }

    pub fn rows_of(&self, v: Var) -> Vec<Vec<f64>> {
        let (_, c) = self.shape(v);
        self.value(v).chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.needs(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.shape(a), self.shape(b));
        if br != 1 || bc != c {
            return Err(Error::Shape(format!("add_row {r}x{c} with {br}x{bc}")));
        }
        let bias = self.value(b);
        let out = self.value(a).chunks(c).flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y)).collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::AddRow(a, b), ng))
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is `r x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ((r, c), (cr, cc)) = (self.shape(a), self.shape(col));
        if cr != r || cc != 1 {
            return Err(Error::Shape(format!("mul_col {r}x{c} with {cr}x{cc}")));
        }
        let s = self.value(col);
        let out = self
            .value(a)
            .chunks(c)
            .zip(s)
            .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
            .collect();
        let ng = self.needs(&[a, col]);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::Scale(a, k), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| 1.0 - x).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::OneMinus(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        check_dropout_rate(p)?;
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c).map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(r, c, out, Op::MulConst(a, mask), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::Shape("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape(format!("column slice {start}..{end} of width {c}")));
        }
        let w = end - start;
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(r, w, out, Op::SliceCols(a, start), ng))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for table with {n} rows")));
        }
        let x = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(ids.len(), c, out, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Softmax over the last axis (`axis = 1`) or over columns (`axis = 0`).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => {
                let c = self.shape(x).1;
                self.group_softmax(x, &[(0, c)], None)
            }
            0 => {
                let t = self.transpose(x);
                let s = self.softmax(t, 1)?;
                Ok(self.transpose(s))
            }
            _ => Err(Error::Shape(format!("softmax axis {axis} on a matrix"))),
        }
    }

    /// Row-wise softmax restricted to each column group independently.
    ///
    /// Entries excluded by `keep` (row-major, same shape as `x`) or holding a
    /// masked score get probability exactly 0. A group with no surviving entry
    /// in some row is an error.
    pub fn group_softmax(&mut self, x: Var, groups: &[(usize, usize)], keep: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if keep.is_some_and(|k| k.len() != r * c) {
            return Err(Error::Shape("softmax keep-mask shape".into()));
        }
        if groups.iter().any(|&(s, e)| s >= e || e > c) {
            return Err(Error::Shape("softmax column group out of range".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for &(s, e) in groups {
                let live = |j: usize| keep.is_none_or(|k| k[i * c + j]) && !is_masked(xv[i * c + j]);
                let max = (s..e).filter(|&j| live(j)).map(|j| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: i });
                }
                let mut z = 0.0;
                for j in s..e {
                    if live(j) {
                        let v = (xv[i * c + j] - max).exp();
                        out[i * c + j] = v;
                        z += v;
                    }
                }
                for o in &mut out[i * c + s..i * c + e] {
                    *o /= z;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::GroupSoftmax { x, groups: groups.to_vec() }, ng))
    }

    /// Per-row standardization followed by `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::Shape(format!("layer_norm gain/bias must be 1x{c}")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Column-wise max over each row segment. Ties resolve to the lowest row.
    pub fn segment_max_pool(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(x);
        check_partition(segments, r)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for &(s, e) in segments {
            for j in 0..c {
                let mut best = s;
                for t in s + 1..e {
                    if xv[t * c + j] > xv[best * c + j] {
                        best = t;
                    }
                }
                out.push(xv[best * c + j]);
                argmax.push(best);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(segments.len(), c, out, Op::SegmentMaxPool { x, argmax }, ng))
    }

    /// Repeats column `l` of `a` (`r x L`) across the columns of segment `l`.
    pub fn expand_cols(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, l) = self.shape(a);
        if segments.len() != l {
            return Err(Error::Shape(format!("{} segments for {l} columns", segments.len())));
        }
        let t = segments.last().map_or(0, |s| s.1);
        check_partition(segments, t)?;
        let av = self.value(a);
        let mut out = vec![0.0; r * t];
        for i in 0..r {
            for (li, &(s, e)) in segments.iter().enumerate() {
                out[i * t + s..i * t + e].fill(av[i * l + li]);
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(r, t, out, Op::ExpandCols(a, segments.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.needs(&[a]);
        self.push(1, c, out, Op::MeanRows(a), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::Shape(format!("{} targets for {r} rows", targets.len())));
        }
        if targets.iter().flatten().any(|&t| t >= c) {
            return Err(Error::Shape("target class out of range".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lz = z.ln() + max;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lz).exp();
            }
            if let Some(t) = *target {
                loss += lz - row[t];
                count += 1;
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads, param_vars: self.param_vars.iter().map(|(&id, &v)| (id, v)).collect() })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.rows, node.cols);
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| mm_nt_acc(dy, bv, g, r, c, k));
                acc(*b, &mut |g| mm_tn_acc(av, dy, g, r, k, c));
            }
            Op::MatMulNT(a, b) => {
                let k = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| mm_acc(dy, bv, g, r, c, k));
                acc(*b, &mut |g| mm_tn_acc(dy, av, g, r, c, k));
            }
            Op::Transpose(a) => acc(*a, &mut |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += dy[i * c + j];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| g.iter_mut().zip(dy).zip(bv).for_each(|((x, d), y)| *x += d * y));
                acc(*b, &mut |g| g.iter_mut().zip(dy).zip(av).for_each(|((x, d), y)| *x += d * y));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| dy.chunks(c).for_each(|row| add_into(g, row)));
            }
            Op::MulCol(a, col) => {
                let (av, sv) = (self.value(*a), self.value(*col));
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[i * c + j] * sv[i];
                        }
                    }
                });
                acc(*col, &mut |g| {
                    for i in 0..r {
                        g[i] += (0..c).map(|j| dy[i * c + j] * av[i * c + j]).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d * k)),
            Op::OneMinus(a) => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x -= d)),
            Op::MulConst(a, m) => acc(*a, &mut |g| g.iter_mut().zip(dy).zip(m).for_each(|((x, d), k)| *x += d * k)),
            Op::Sigmoid(a) => {
                let y = &node.data;
                acc(*a, &mut |g| g.iter_mut().zip(dy).zip(y).for_each(|((x, d), s)| *x += d * s * (1.0 - s)));
            }
            Op::Relu(a) => {
                let y = &node.data;
                acc(*a, &mut |g| {
                    g.iter_mut().zip(dy).zip(y).for_each(|((x, d), o)| {
                        if *o > 0.0 {
                            *x += d
                        }
                    })
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, &mut |g| {
                        for i in 0..r {
                            add_into(&mut g[i * w..(i + 1) * w], &dy[i * c + offset..i * c + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let full = self.shape(*a).1;
                acc(*a, &mut |g| {
                    for i in 0..r {
                        add_into(&mut g[i * full + start..i * full + start + c], &dy[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Gather(table, ids) => acc(*table, &mut |g| {
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                }
            }),
            Op::GroupSoftmax { x, groups } => {
                let y = &node.data;
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for &(s, e) in groups {
                            let row = i * c;
                            let dot: f64 = (s..e).map(|j| y[row + j] * dy[row + j]).sum();
                            for j in s..e {
                                g[row + j] += y[row + j] * (dy[row + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        let row = i * c;
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = dy[row + j] * gv[j];
                            sum_d += d;
                            sum_dh += d * xhat[row + j];
                        }
                        let n = c as f64;
                        for j in 0..c {
                            let d = dy[row + j] * gv[j];
                            g[row + j] += inv_std[i] / n * (n * d - sum_d - xhat[row + j] * sum_dh);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |g| dy.chunks(c).for_each(|row| add_into(g, row)));
            }
            Op::SegmentMaxPool { x, argmax } => acc(*x, &mut |g| {
                for l in 0..r {
                    for j in 0..c {
                        g[argmax[l * c + j] * c + j] += dy[l * c + j];
                    }
                }
            }),
            Op::ExpandCols(a, segments) => {
                let l = segments.len();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for (li, &(s, e)) in segments.iter().enumerate() {
                            g[i * l + li] += dy[i * c + s..i * c + e].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += dy[0])),
            Op::MeanRows(a) => {
                let rows = self.shape(*a).0;
                acc(*a, &mut |g| {
                    for row in g.chunks_mut(c) {
                        row.iter_mut().zip(dy).for_each(|(x, d)| *x += d / rows as f64);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits).1;
                let k = dy[0] / *count as f64;
                acc(*logits, &mut |g| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                g[i * v + j] += k * probs[i * v + j];
                            }
                            g[i * v + t] -= k;
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Checks that `segments` tile `0..len` in order without gaps.
pub fn check_partition(segments: &[(usize, usize)], len: usize) -> Result<()> {
    let mut cursor = 0;
    for &(s, e) in segments {
        if s != cursor || e <= s {
            return Err(Error::Shape(format!("segments {segments:?} do not partition 0..{len}")));
        }
        cursor = e;
    }
    if cursor != len || segments.is_empty() {
        return Err(Error::Shape(format!("segments {segments:?} do not partition 0..{len}")));
    }
    Ok(())
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, graph: &Graph<'_>) -> Vec<f64> {
        let (r, c) = graph.shape(v);
        self.get(v).map_or_else(|| vec![0.0; r * c], <[f64]>::to_vec)
    }

    /// `(parameter id, gradient)` for every parameter used in the graph,
    /// sorted by parameter id. Disconnected parameters get zeros.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> =
            self.param_vars.iter().map(|&(id, v)| (id, self.get_or_zeros(v, graph))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds parameter gradients into `store`.
    pub fn accumulate_into(&self, graph: &Graph<'_>, store: &mut ParameterStore) {
        for (id, g) in self.param_grads(graph) {
            store.accumulate_grad(id, &g);
        }
    }
}
