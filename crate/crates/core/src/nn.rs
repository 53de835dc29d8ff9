//! Layers and the optimizer shared by the three networks.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot-style init; `gain` scales the weight std.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(fan_in, fan_out, std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    /// All-zero layer; makes residual branches start as the identity.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).rows
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols
    }
}

/// 1-D convolution over rows (time) with channels in columns.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::new(store, name, c_in * kernel, c_out, 1.0, rng);
        Self { lin, kernel, stride, pad: (kernel - 1) / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let cols = g.unfold(x, self.kernel, self.stride, self.pad);
        self.lin.forward(g, store, cols)
    }
}

/// Sinusoidal position features, `n × dim`.
pub fn positional_encoding(n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(n, dim);
    for pos in 0..n {
        for i in 0..dim {
            let rate = 1.0 / 10000_f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Single-head scaled dot-product attention with an output projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Attention output together with its weight matrix (queries × keys).
pub struct AttentionOut {
    pub out: Var,
    pub weights: Var,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), q_dim, hidden, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, hidden, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, hidden, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), hidden, out_dim, 1.0, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> AttentionOut {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let hidden = g.value(q).cols;
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (hidden as f64).sqrt());
        let weights = g.softmax_rows(scores, mask);
        let ctx = g.matmul(weights, v);
        let out = self.o.forward(g, store, ctx);
        AttentionOut { out, weights }
    }
}

/// Lower-triangular allow-mask for self-attention over `n` positions:
/// entry `(i, j)` is `true` iff `j <= i`.
pub fn causality_mask(n: usize) -> Vec<bool> {
    assert!(n >= 1, "causality mask needs at least one position");
    (0..n * n).map(|k| k % n <= k / n).collect()
}

/// One LSTM layer applied to a batch of sequences stepping in lockstep.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub gates: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let gates = Linear::new(store, name, input + hidden, 4 * hidden, 1.0, rng);
        // forget-gate bias starts at 1
        let b = store.get_mut(gates.b);
        for c in hidden..2 * hidden {
            b.set(0, c, 1.0);
        }
        Self { gates, hidden }
    }

    /// `steps[t]` is `batch × input`; returns hidden states per step.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Vec<Var> {
        let batch = g.value(steps[0]).rows;
        let h_dim = self.hidden;
        let mut h = g.constant(Tensor::zeros(batch, h_dim));
        let mut c = g.constant(Tensor::zeros(batch, h_dim));
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let xh = g.concat_cols(x, h);
            let z = self.gates.forward(g, store, xh);
            let i = g.slice_cols(z, 0, h_dim);
            let f = g.slice_cols(z, h_dim, 2 * h_dim);
            let o = g.slice_cols(z, 2 * h_dim, 3 * h_dim);
            let u = g.slice_cols(z, 3 * h_dim, 4 * h_dim);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let o = g.sigmoid(o);
            let u = g.tanh(u);
            let fc = g.mul(f, c);
            let iu = g.mul(i, u);
            c = g.add(fc, iu);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out.push(h);
        }
        out
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0), step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = store.get_mut(id);
            for k in 0..p.data.len() {
                let gk = grad.data[k] * clip;
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
