//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Trainable weights
//! live in a [`ParamStore`] and enter a graph through [`Graph::param`], which
//! reuses one leaf per parameter so weights shared across time steps
//! accumulate their gradients correctly. [`Graph::detach`] is the gradient
//! stop: the returned node carries the same value but no backward edge.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};

pub type ParamId = usize;

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if other.names != self.names {
            return Err("parameter names differ".into());
        }
        for (i, v) in other.values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                ));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    ScaleVar(Var, Var),
    AddScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var, f64),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    RepeatRowsEach(Var, usize),
    MeanPoolRows(Var, usize),
    Unfold { input: Var, kernel: usize, stride: usize, pad: usize },
    Embedding(Var, Rc<Vec<usize>>),
    LogAbsDet(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_of: HashMap<usize, ParamId>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter id; parameters the loss did not reach get `None`.
    pub fn params(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n_params];
        for (&node, &pid) in &self.param_of {
            if let Some(g) = &self.grads[node] {
                out[pid] = Some(g.clone());
            }
        }
        out
    }

    /// Gradient per parameter id with zeros for unreached parameters.
    pub fn params_dense(&self, store: &ParamStore) -> Vec<Tensor> {
        self.params(store.len())
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(store.get(i).rows, store.get(i).cols)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_of: HashMap::new(), track: true }
    }

    /// A graph that never builds backward state; used for inference.
    pub fn inference() -> Self {
        Self { track: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.track });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row` with a `1 × cols` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row expects a 1x{} row", av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "mul_row expects a 1x{} row", av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *x *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `n × 1` column repeated into `n × cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, 1, "broadcast_cols expects a column");
        let mut out = Tensor::zeros(av.rows, cols);
        for r in 0..av.rows {
            out.row_mut(r).fill(av.data[r]);
        }
        let ng = self.ng(a);
        self.push(out, Op::BroadcastCols(a), ng)
    }

    /// `1 × c` row repeated into `rows × c`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, 1, "broadcast_rows expects a row");
        let mut out = Tensor::zeros(rows, av.cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&av.data);
        }
        let ng = self.ng(a);
        self.push(out, Op::BroadcastRows(a), ng)
    }

    /// `a * s` for a `1 × 1` variable `s`.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleVar(a, s), ng)
    }

    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x + sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::AddScalarVar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Elementwise clamp; the gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Per-row sums as an `n × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(v.rows, 1, data);
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows).map(|r| logsumexp(v.row(r))).collect();
        let out = Tensor::from_vec(v.rows, 1, data);
        let ng = self.ng(a);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    /// Row softmax. Disallowed entries (`mask[r * cols + c] == false`) get
    /// probability zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let v = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), v.len(), "mask shape mismatch");
        }
        let mut out = Tensor::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let allowed = |c: usize| mask.map_or(true, |m| m[r * v.cols + c]);
            let row = v.row(r);
            let max = (0..v.cols).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            let o = out.row_mut(r);
            for c in 0..v.cols {
                if allowed(c) {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Rows scaled to unit L2 norm; `eps` guards the zero row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows {
            let n = (v.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for x in out.row_mut(r) {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows(a, eps), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let mut out = Tensor::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let o = out.row_mut(r);
            o[..av.cols].copy_from_slice(av.row(r));
            o[av.cols..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start <= end && end <= v.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows, end - start);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Row-major reinterpretation; `rows * cols` must be preserved.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape changes element count");
        let out = Tensor::from_vec(rows, cols, v.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Nearest-neighbour upsampling along rows: each row repeated `r` times.
    pub fn repeat_rows_each(&mut self, a: Var, r: usize) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows * r, v.cols);
        for i in 0..v.rows {
            for k in 0..r {
                out.row_mut(i * r + k).copy_from_slice(v.row(i));
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatRowsEach(a, r), ng)
    }

    /// Averages consecutive groups of `r` rows; the last group may be short.
    pub fn mean_pool_rows(&mut self, a: Var, r: usize) -> Var {
        let v = self.value(a);
        let groups = v.rows.div_ceil(r);
        let mut out = Tensor::zeros(groups, v.cols);
        for g in 0..groups {
            let (s, e) = (g * r, ((g + 1) * r).min(v.rows));
            let inv = 1.0 / (e - s) as f64;
            let o = out.row_mut(g);
            for i in s..e {
                for (x, y) in o.iter_mut().zip(v.row(i)) {
                    *x += y * inv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanPoolRows(a, r), ng)
    }

    /// Sliding windows over rows (im2col): output row `t` holds input rows
    /// `t*stride - pad .. t*stride - pad + kernel` flattened, zero outside.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let v = self.value(a);
        let (t_in, c) = v.shape();
        let padded = t_in + 2 * pad;
        assert!(padded >= kernel, "unfold: input shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut out = Tensor::zeros(t_out, kernel * c);
        for t in 0..t_out {
            let o = out.row_mut(t);
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    o[j * c..(j + 1) * c].copy_from_slice(v.row(src as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Unfold { input: a, kernel, stride, pad }, ng)
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Embedding(table, Rc::new(ids.to_vec())), ng)
    }

    /// `log|det W|` of a square matrix as a `1 × 1` node.
    pub fn log_abs_det(&mut self, w: Var) -> Var {
        let (lad, inv) = log_abs_det_and_inverse(self.value(w))
            .expect("log_abs_det of a singular matrix");
        let ng = self.ng(w);
        self.push(Tensor::scalar(lad), Op::LogAbsDet(w, Rc::new(inv)), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, param_of: self.param_of.clone() }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    gemm(g, false, bv, true, &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows, bv.cols);
                    gemm(av, true, g, false, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(&rv.data) {
                        *x *= s;
                    }
                }
                acc(*a, ga);
                acc(*row, col_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::BroadcastCols(a) => {
                let data = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
                acc(*a, Tensor::from_vec(g.rows, 1, data));
            }
            Op::BroadcastRows(a) => acc(*a, col_sums(g)),
            Op::ScaleVar(a, s) => {
                let sv = val(*s).item();
                acc(*a, g.scale(sv));
                let ds: f64 = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                acc(*s, Tensor::scalar(ds));
            }
            Op::AddScalarVar(a, s) => {
                acc(*a, g.clone());
                acc(*s, Tensor::scalar(g.sum()));
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(a, slope) => {
                acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { d * slope }))
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |d, e| d * e)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |d, x| d * x.signum() * f64::from(x != 0.0))),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |d, s| d * 0.5 / s)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, g.zip_map(val(*a), |d, x| if x >= lo && x <= hi { d } else { 0.0 }))
            }
            Op::Sum(a) => {
                let v = val(*a);
                acc(*a, Tensor::filled(v.rows, v.cols, g.item()));
            }
            Op::Mean(a) => {
                let v = val(*a);
                acc(*a, Tensor::filled(v.rows, v.cols, g.item() / v.len() as f64));
            }
            Op::RowSum(a) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for r in 0..v.rows {
                    ga.row_mut(r).fill(g.data[r]);
                }
                acc(*a, ga);
            }
            Op::LogSumExpRows(a) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for r in 0..v.rows {
                    let lse = y.data[r];
                    for (o, x) in ga.row_mut(r).iter_mut().zip(v.row(r)) {
                        *o = g.data[r] * (x - lse).exp();
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::NormalizeRows(a, eps) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for r in 0..v.rows {
                    let n = (v.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for ((o, p), d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (d - p * dot) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).cols;
                let bc = val(*b).cols;
                let mut ga = Tensor::zeros(g.rows, ac);
                let mut gb = Tensor::zeros(g.rows, bc);
                for r in 0..g.rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows;
                    acc(p, g.slice_rows(start, start + rows));
                    start += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                ga.data[start * v.cols..(start + g.rows) * v.cols].copy_from_slice(&g.data);
                acc(*a, ga);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let v = val(*a);
                acc(*a, Tensor::from_vec(v.rows, v.cols, g.data.clone()));
            }
            Op::RepeatRowsEach(a, rep) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for i in 0..v.rows {
                    let o = ga.row_mut(i);
                    for k in 0..*rep {
                        for (x, d) in o.iter_mut().zip(g.row(i * rep + k)) {
                            *x += d;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::MeanPoolRows(a, r) => {
                let v = val(*a);
                let mut ga = Tensor::zeros(v.rows, v.cols);
                for grp in 0..g.rows {
                    let (s, e) = (grp * r, ((grp + 1) * r).min(v.rows));
                    let inv = 1.0 / (e - s) as f64;
                    for i in s..e {
                        for (x, d) in ga.row_mut(i).iter_mut().zip(g.row(grp)) {
                            *x += d * inv;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Unfold { input, kernel, stride, pad } => {
                let v = val(*input);
                let (t_in, c) = v.shape();
                let mut ga = Tensor::zeros(t_in, c);
                for t in 0..g.rows {
                    let gr = g.row(t);
                    for j in 0..*kernel {
                        let src = (t * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < t_in {
                            for (x, d) in ga.row_mut(src as usize).iter_mut().zip(&gr[j * c..(j + 1) * c]) {
                                *x += d;
                            }
                        }
                    }
                }
                acc(*input, ga);
            }
            Op::Embedding(table, ids) => {
                let v = val(*table);
                let mut gt = Tensor::zeros(v.rows, v.cols);
                for (i, &id) in ids.iter().enumerate() {
                    for (x, d) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *x += d;
                    }
                }
                acc(*table, gt);
            }
            Op::LogAbsDet(w, inv) => acc(*w, inv.transpose().scale(g.item())),
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (x, d) in out.data.iter_mut().zip(g.row(r)) {
            *x += d;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log|det W|` and `W⁻¹` via LU with partial pivoting.
pub fn log_abs_det_and_inverse(w: &Tensor) -> Option<(f64, Tensor)> {
    assert_eq!(w.rows, w.cols, "determinant of a non-square matrix");
    let n = w.rows;
    let m = nalgebra::DMatrix::from_row_slice(n, n, &w.data);
    let lu = m.lu();
    let u = lu.u();
    let lad = (0..n).map(|i| u[(i, i)].abs().ln()).sum::<f64>();
    let inv = lu.try_inverse()?;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            data.push(inv[(r, c)]);
        }
    }
    lad.is_finite().then(|| (lad, Tensor::from_vec(n, n, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at `x` for every coordinate.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            out.data[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let loss = build(&mut g, v);
        let grads = g.backward(loss);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = build(&mut g, v);
            g.scalar(l)
        };
        let numeric = numeric_grad(&x, &f);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_matmul_chain() {
        let w = rand_t(4, 3, 1);
        check(rand_t(5, 4, 2), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let t = g.tanh(y);
            let s = g.square(t);
            g.sum(s)
        });
    }

    #[test]
    fn grad_softmax_masked_and_lse() {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
        check(rand_t(4, 4, 3), move |g, x| {
            let p = g.softmax_rows(x, Some(&mask));
            let c = g.constant(rand_t(4, 4, 9));
            let m = g.mul(p, c);
            let l = g.logsumexp_rows(m);
            g.sum(l)
        });
    }

    #[test]
    fn grad_normalize_and_scale_var() {
        check(rand_t(3, 5, 4), |g, x| {
            let n = g.normalize_rows(x, 1e-12);
            let s = g.slice_cols(x, 0, 1);
            let s = g.slice_rows(s, 0, 1);
            let y = g.scale_var(n, s);
            let y = g.add_scalar_var(y, s);
            let e = g.exp(y);
            g.mean(e)
        });
    }

    #[test]
    fn grad_unfold_pool_repeat() {
        check(rand_t(9, 2, 5), |g, x| {
            let u = g.unfold(x, 3, 2, 1);
            let w = g.constant(rand_t(6, 2, 6));
            let y = g.matmul(u, w);
            let p = g.mean_pool_rows(y, 2);
            let r = g.repeat_rows_each(p, 3);
            let r = g.reshape(r, 3, 6);
            let t = g.transpose(r);
            let sq = g.square(t);
            g.sum(sq)
        });
    }

    #[test]
    fn grad_rows_cols_broadcasts() {
        check(rand_t(3, 4, 7), |g, x| {
            let row = g.slice_rows(x, 1, 2);
            let a = g.add_row(x, row);
            let m = g.mul_row(a, row);
            let col = g.row_sum(m);
            let b = g.broadcast_cols(col, 2);
            let c = g.concat_cols(b, x);
            let d = g.broadcast_rows(row, 3);
            let e = g.concat_rows(&[d, x]);
            let s1 = g.sum(c);
            let sq = g.square(e);
            let s2 = g.sum(sq);
            let t = g.add(s1, s2);
            let sig = g.sigmoid(t);
            g.sum(sig)
        });
    }

    #[test]
    fn grad_log_abs_det() {
        let x = Tensor::from_rows(&[vec![2.0, 0.3, 0.1], vec![-0.4, 1.5, 0.2], vec![0.1, 0.1, -1.2]]);
        check(x, |g, w| g.log_abs_det(w));
    }

    #[test]
    fn grad_embedding_and_sub() {
        check(rand_t(4, 3, 8), |g, table| {
            let e = g.embedding(table, &[0, 2, 2, 3]);
            let c = g.constant(rand_t(4, 3, 10));
            let d = g.sub(e, c);
            let a = g.square(d);
            let l = g.add_const(a, 1.0);
            let l = g.log(l);
            let l = g.sqrt(l);
            g.sum(l)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let d = g.detach(x);
        let y = g.mul(d, x);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap().item(), 3.0);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.params(1)[0].as_ref().unwrap().item(), 4.0);
    }
}
