//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A `Tape` records one forward computation as a flat list of nodes; each
//! node stores its value and the op that produced it. `backward` walks the
//! list in reverse, accumulating vector-Jacobian products. Tapes are built
//! eagerly, owned by one pass, and dropped afterwards.
//!
//! Constants do not participate in differentiation: any value entering via
//! [`Tape::constant`] contributes zero to every gradient.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::real::Real;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradients keyed by parameter name; every requested parameter appears
/// exactly once, with a gradient of the parameter's shape.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<S: Real = f32> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> GradientMap<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// self += other, elementwise per parameter. Missing entries are adopted.
    pub fn accumulate(&mut self, other: &GradientMap<S>) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(t) => {
                    for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: S) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

enum Op<S: Real> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddRowBias { a: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { a: Var, k: S },
    AddConst { a: Var },
    SumAll { a: Var },
    Exp { a: Var },
    Silu { a: Var },
    Tanh { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: S },
    LogSoftmax { a: Var },
    Softmax { a: Var },
    ChannelDrive { x: Var, b: Var },
    Scan { u: Var, a: Var, h0: Var },
    StraightThrough { relaxed: Var },
    Reshape { a: Var },
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, usize)>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter under `name`. Gradients for it appear
    /// in the map returned by [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v.0));
        v
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2");
        assert_eq!(sa[1], sb[0], "matmul inner dims must match");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul { a, b }, g)
    }

    /// x + bias per row; x: [rows, n], bias: [n].
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let rows = self.value(a).shape()[0];
        let n = self.value(bias).numel();
        assert_eq!(self.value(a).numel(), rows * n);
        let mut data = self.value(a).data().to_vec();
        kernels::add_row_bias(&mut data, self.value(bias).data(), rows);
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a) || self.ng(bias);
        self.push(t, Op::AddRowBias { a, bias }, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel());
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Add { a, b }, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel());
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub { a, b }, g)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel());
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a) || self.ng(b);
        self.push(t, Op::MulElem { a, b }, g)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| x * k).collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::Scale { a, k }, g)
    }

    pub fn add_const(&mut self, a: Var, k: S) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| x + k).collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::AddConst { a }, g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = S::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let g = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::Exp { a }, g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = kernels::silu(self.value(a).data());
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::Silu { a }, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::Tanh { a }, g)
    }

    /// Per-row layer norm; a: [rows, n], gamma/beta: [n].
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let rows = self.value(a).shape()[0];
        let data = kernels::layer_norm_rows(
            self.value(a).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            rows,
            eps,
        );
        let t = Tensor::new(self.value(a).shape(), data).unwrap();
        let g = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { a, gamma, beta, eps }, g)
    }

    /// Log-softmax along the last axis of a rank-2 value.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 2);
        let data = kernels::log_softmax_rows(self.value(a).data(), shape[0], shape[1]);
        let t = Tensor::new(&shape, data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::LogSoftmax { a }, g)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 2);
        let data = kernels::softmax_rows(self.value(a).data(), shape[0], shape[1]);
        let t = Tensor::new(&shape, data).unwrap();
        let g = self.ng(a);
        self.push(t, Op::Softmax { a }, g)
    }

    /// Per-channel state drive; x: [t, channels], b: [channels, state]
    /// gives [t, channels*state].
    pub fn channel_drive(&mut self, x: Var, b: Var) -> Var {
        let (t_len, channels) = {
            let s = self.value(x).shape();
            (s[0], s[1])
        };
        let state = self.value(b).shape()[1];
        assert_eq!(self.value(b).shape()[0], channels);
        let data = kernels::channel_drive(
            self.value(x).data(),
            self.value(b).data(),
            t_len,
            channels,
            state,
        );
        let t = Tensor::new(&[t_len, channels * state], data).unwrap();
        let g = self.ng(x) || self.ng(b);
        self.push(t, Op::ChannelDrive { x, b }, g)
    }

    /// Linear recurrence h_t = a ⊙ h_{t-1} + u_t; u: [t, w], a/h0: [w].
    /// `mode` picks the forward evaluation path; the adjoint is shared.
    pub fn scan(&mut self, u: Var, a: Var, h0: Var, mode: ScanMode) -> Var {
        let (t_len, w) = {
            let s = self.value(u).shape();
            (s[0], s[1])
        };
        assert_eq!(self.value(a).numel(), w);
        assert_eq!(self.value(h0).numel(), w);
        let data = match mode {
            ScanMode::Sequential => kernels::scan_sequential(
                self.value(a).data(),
                self.value(u).data(),
                self.value(h0).data(),
                t_len,
            ),
            ScanMode::Parallel => kernels::scan_parallel(
                self.value(a).data(),
                self.value(u).data(),
                self.value(h0).data(),
                t_len,
            ),
        };
        let t = Tensor::new(&[t_len, w], data).unwrap();
        let g = self.ng(u) || self.ng(a) || self.ng(h0);
        self.push(t, Op::Scan { u, a, h0 }, g)
    }

    /// Forward: exact one-hot at the argmax of each row of `relaxed`.
    /// Backward: identity into `relaxed` (straight-through).
    pub fn straight_through(&mut self, relaxed: Var) -> Var {
        let shape = self.value(relaxed).shape().to_vec();
        assert_eq!(shape.len(), 2);
        let (rows, n) = (shape[0], shape[1]);
        let src = self.value(relaxed).data();
        let mut data = vec![S::ZERO; rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            data[r * n + best] = S::ONE;
        }
        let t = Tensor::new(&shape, data).unwrap();
        let g = self.ng(relaxed);
        self.push(t, Op::StraightThrough { relaxed }, g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).reshaped(shape).expect("reshape numel");
        let g = self.ng(a);
        self.push(t, Op::Reshape { a }, g)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss with respect to the given
    /// parameter handles. Parameters the loss does not depend on get zero
    /// gradients; handles that were never registered via [`Tape::param`]
    /// are a usage error.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<GradientMap<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::usage("backward requires a scalar loss"));
        }
        for p in params {
            if !self.params.iter().any(|(_, id)| *id == p.0) {
                return Err(Error::usage("parameter not on tape"));
            }
        }

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = BTreeMap::new();
        for p in params {
            let name = self
                .params
                .iter()
                .find(|(_, id)| *id == p.0)
                .map(|(n, _)| n.clone())
                .unwrap();
            let shape = self.value(*p).shape();
            let g = match &grads[p.0] {
                Some(g) => Tensor::new(shape, g.clone()).unwrap(),
                None => Tensor::zeros(shape),
            };
            map.insert(name, g);
        }
        Ok(GradientMap { map })
    }

    /// Gradients for every registered parameter.
    pub fn backward_all(&self, loss: Var) -> Result<GradientMap<S>> {
        let params: Vec<Var> = self.params.iter().map(|(_, id)| Var(*id)).collect();
        self.backward(loss, &params)
    }

    fn acc(&self, grads: &mut Vec<Option<Vec<S>>>, v: Var, delta: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                if self.ng(*a) {
                    // dA = G @ B^T, with B transposed once for row-major reads.
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    let mut da = vec![S::ZERO; m * k];
                    kernels::matmul_acc(g, &bt, &mut da, m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let mut db = vec![S::ZERO; k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), g, &mut db, k, m, n);
                    self.acc(grads, *b, &db);
                }
            }

            Op::AddRowBias { a, bias } => {
                self.acc(grads, *a, g);
                if self.ng(*bias) {
                    let n = self.value(*bias).numel();
                    let rows = g.len() / n;
                    let mut db = vec![S::ZERO; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    self.acc(grads, *bias, &db);
                }
            }

            Op::Add { a, b } => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }

            Op::Sub { a, b } => {
                self.acc(grads, *a, g);
                if self.ng(*b) {
                    let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                    self.acc(grads, *b, &neg);
                }
            }

            Op::MulElem { a, b } => {
                if self.ng(*a) {
                    let da: Vec<S> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *a, &da);
                }
                if self.ng(*b) {
                    let db: Vec<S> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc(grads, *b, &db);
                }
            }

            Op::Scale { a, k } => {
                let da: Vec<S> = g.iter().map(|&x| x * *k).collect();
                self.acc(grads, *a, &da);
            }

            Op::AddConst { a } => self.acc(grads, *a, g),

            Op::SumAll { a } => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.acc(grads, *a, &da);
            }

            Op::Exp { a } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                self.acc(grads, *a, &da);
            }

            Op::Silu { a } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &y)| x * kernels::silu_grad(y))
                    .collect();
                self.acc(grads, *a, &da);
            }

            Op::Tanh { a } => {
                let da: Vec<S> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&x, &y)| x * (S::ONE - y * y))
                    .collect();
                self.acc(grads, *a, &da);
            }

            Op::LayerNorm { a, gamma, beta, eps } => {
                let n = self.value(*gamma).numel();
                let rows = g.len() / n;
                let x = self.value(*a).data();
                let gam = self.value(*gamma).data();
                let inv_n = S::ONE / S::from_f64(n as f64);
                let mut dx = vec![S::ZERO; rows * n];
                let mut dgamma = vec![S::ZERO; n];
                let mut dbeta = vec![S::ZERO; n];
                for r in 0..rows {
                    let xr = &x[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut mean = S::ZERO;
                    for &v in xr {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = S::ZERO;
                    for &v in xr {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = S::ONE / (var + *eps).sqrt();
                    let mut sum_dxh = S::ZERO;
                    let mut sum_dxh_xh = S::ZERO;
                    let mut xh = vec![S::ZERO; n];
                    let mut dxh = vec![S::ZERO; n];
                    for j in 0..n {
                        xh[j] = (xr[j] - mean) * inv_std;
                        dxh[j] = gr[j] * gam[j];
                        sum_dxh += dxh[j];
                        sum_dxh_xh += dxh[j] * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] =
                            inv_std * (dxh[j] - inv_n * sum_dxh - xh[j] * inv_n * sum_dxh_xh);
                    }
                }
                self.acc(grads, *a, &dx);
                self.acc(grads, *gamma, &dgamma);
                self.acc(grads, *beta, &dbeta);
            }

            Op::LogSoftmax { a } => {
                let shape = self.nodes[i].value.shape();
                let (rows, n) = (shape[0], shape[1]);
                let out = self.nodes[i].value.data();
                let mut da = vec![S::ZERO; rows * n];
                for r in 0..rows {
                    let mut gsum = S::ZERO;
                    for j in 0..n {
                        gsum += g[r * n + j];
                    }
                    for j in 0..n {
                        da[r * n + j] = g[r * n + j] - out[r * n + j].exp() * gsum;
                    }
                }
                self.acc(grads, *a, &da);
            }

            Op::Softmax { a } => {
                let shape = self.nodes[i].value.shape();
                let (rows, n) = (shape[0], shape[1]);
                let y = self.nodes[i].value.data();
                let mut da = vec![S::ZERO; rows * n];
                for r in 0..rows {
                    let mut dot = S::ZERO;
                    for j in 0..n {
                        dot += g[r * n + j] * y[r * n + j];
                    }
                    for j in 0..n {
                        da[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
                    }
                }
                self.acc(grads, *a, &da);
            }

            Op::ChannelDrive { x, b } => {
                let (t_len, channels) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let state = self.value(*b).shape()[1];
                let xv = self.value(*x).data();
                let bv = self.value(*b).data();
                if self.ng(*x) {
                    let mut dx = vec![S::ZERO; t_len * channels];
                    for t in 0..t_len {
                        for c in 0..channels {
                            let mut s = S::ZERO;
                            let base = t * channels * state + c * state;
                            for j in 0..state {
                                s += g[base + j] * bv[c * state + j];
                            }
                            dx[t * channels + c] = s;
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.ng(*b) {
                    let mut db = vec![S::ZERO; channels * state];
                    for t in 0..t_len {
                        for c in 0..channels {
                            let base = t * channels * state + c * state;
                            let xval = xv[t * channels + c];
                            for j in 0..state {
                                db[c * state + j] += g[base + j] * xval;
                            }
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }

            Op::Scan { u, a, h0 } => {
                let t_len = self.value(*u).shape()[0];
                let (d_u, d_a, d_h0) = kernels::scan_backward(
                    self.value(*a).data(),
                    self.nodes[i].value.data(),
                    self.value(*h0).data(),
                    g,
                    t_len,
                );
                self.acc(grads, *u, &d_u);
                self.acc(grads, *a, &d_a);
                self.acc(grads, *h0, &d_h0);
            }

            Op::StraightThrough { relaxed } => self.acc(grads, *relaxed, g),

            Op::Reshape { a } => self.acc(grads, *a, g),
        }
    }
}
