//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar with respect to every input and parameter leaf that was reached.

use std::collections::HashMap;

use super::{conv, dense, gru, norm, pool, Tensor};
use crate::error::{arg_err, shape_err, Result};
use crate::par::Exec;

pub use norm::BatchStats;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor: `group` names the owning parameter set and
/// `index` the slot inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub index: usize,
}

/// Batch-norm behavior for one call.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running mean and variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    GradReverse(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        padded: Vec<f64>,
        dims: conv::ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: norm::NormCache,
        lengths: Option<Vec<usize>>,
        dims: norm::NormDims,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    ToSequence {
        x: Var,
    },
    Gru {
        x: Var,
        w_x: Var,
        w_h: Var,
        b: Var,
        h0: Option<Var>,
        cache: gru::GruCache,
        lengths: Vec<usize>,
        dims: gru::GruDims,
    },
    LastStep {
        seq: Var,
        lengths: Vec<usize>,
    },
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        row_mask: Vec<bool>,
        batch: usize,
    },
    WeightedBce {
        pred: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    exec: Exec,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            exec,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Registers a parameter leaf. Registering the same key twice returns the
    /// original node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    /// Copy of `v` cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(t, Op::Sum(a), ng)
    }

    /// `sum_i a_i * w_i` for a constant `w` of the same shape.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        if self.shape(a) != w.shape() {
            return Err(shape_err!(
                "weighted_sum {:?} by {:?}",
                self.shape(a),
                w.shape()
            ));
        }
        let t = Tensor::scalar(
            self.value(a)
                .data()
                .iter()
                .zip(w.data())
                .map(|(x, y)| x * y)
                .sum(),
        );
        let ng = self.needs(a);
        Ok(self.push(t, Op::WeightedSum(a, w.data().to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(arg_err!(
                "gradient reversal needs lambda >= 0, got {lambda}"
            ));
        }
        let t = self.value(a).clone();
        let ng = self.needs(a);
        Ok(self.push(t, Op::GradReverse(a, lambda), ng))
    }

    /// `x: [.., F]`, `w: [O, F]`, `b: [O]` to `[.., O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err!("linear x {:?}, w {:?}, b {:?}", xs, ws, bs));
        }
        let features = ws[1];
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = ws[0];
        let y = dense::forward(
            self.exec,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            features,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&out_shape, y)?, Op::Linear { x, w, b }, ng))
    }

    /// 3x3 same-padding convolution. `x: [N, C_in, H, W]`,
    /// `w: [C_out, C_in, 3, 3]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4
            || ws.len() != 4
            || ws[2] != 3
            || ws[3] != 3
            || ws[1] != xs[1]
            || bs != [ws[0]]
        {
            return Err(shape_err!("conv2d x {:?}, w {:?}, b {:?}", xs, ws, bs));
        }
        let dims = conv::ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            height: xs[2],
            width: xs[3],
        };
        let padded = conv::pad_input(self.exec, self.value(x).data(), dims);
        let y = conv::forward_padded(
            self.exec,
            &padded,
            self.value(w).data(),
            self.value(b).data(),
            dims,
        );
        let shape = [dims.batch, dims.c_out, dims.height, dims.width];
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&shape, y)?,
            Op::Conv2d {
                x,
                w,
                b,
                padded,
                dims,
            },
            ng,
        ))
    }

    /// Per-channel normalization of `[N, C, H, W]`. With `lengths`, columns at
    /// or past `lengths[n]` are ignored and zeroed. Train mode also returns
    /// the batch statistics for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        lengths: Option<&[usize]>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err!("batch_norm x {:?}", xs));
        }
        if let Some(l) = lengths {
            if l.len() != xs[0] {
                return Err(shape_err!(
                    "batch_norm lengths {} for batch {}",
                    l.len(),
                    xs[0]
                ));
            }
        }
        let dims = norm::NormDims {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
        };
        let running = match mode {
            NormMode::Train => {
                if norm::valid_count(dims, lengths) == 0 {
                    return Err(arg_err!("batch_norm in train mode over an empty batch"));
                }
                None
            }
            NormMode::Eval { mean, var } => Some((mean, var)),
        };
        let (y, cache, stats) = norm::forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            lengths,
            dims,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_vec(&xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                lengths: lengths.map(<[usize]>::to_vec),
                dims,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Max pooling with window `(k_h, k_w)` and equal stride, floor mode.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        k_h: usize,
        k_w: usize,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k_h == 0 || k_w == 0 {
            return Err(shape_err!("max_pool2d x {:?} kernel ({k_h}, {k_w})", xs));
        }
        let dims = pool::PoolDims {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            k_h,
            k_w,
        };
        if dims.out_height() == 0 || dims.out_width() == 0 {
            return Err(shape_err!(
                "max_pool2d of {:?} by ({k_h}, {k_w}) leaves an empty output",
                xs
            ));
        }
        let (y, arg) = pool::forward(self.value(x).data(), lengths, dims);
        let shape = [xs[0], xs[1], dims.out_height(), dims.out_width()];
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::MaxPool { x, arg }, ng))
    }

    /// `[N, C, H, W]` to `[N, W, C*H]`: one feature vector per time column,
    /// channel-major.
    pub fn to_sequence(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("to_sequence x {:?}", xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let row = ((s * c + ci) * h + hi) * w;
                    for t in 0..w {
                        out[(s * w + t) * c * h + ci * h + hi] = src[row + t];
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, w, c * h], out)?,
            Op::ToSequence { x },
            ng,
        ))
    }

    /// GRU over `x: [N, T, F]` returning the hidden sequence `[N, T, H]`.
    /// `w_x: [3H, F]`, `w_h: [3H, H]`, `b: [3H]`; `h0: [N, H]` or zeros.
    /// Rows at or past `lengths[n]` are zero.
    pub fn gru(
        &mut self,
        x: Var,
        w_x: Var,
        w_h: Var,
        b: Var,
        h0: Option<Var>,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (wxs, whs, bs) = (self.shape(w_x), self.shape(w_h), self.shape(b));
        if xs.len() != 3 || wxs.len() != 2 || wxs[0] % 3 != 0 {
            return Err(shape_err!("gru x {:?}, w_x {:?}", xs, wxs));
        }
        let hidden = wxs[0] / 3;
        if wxs[1] != xs[2] || whs != [3 * hidden, hidden] || bs != [3 * hidden] {
            return Err(shape_err!(
                "gru x {:?}, w_x {:?}, w_h {:?}, b {:?}",
                xs,
                wxs,
                whs,
                bs
            ));
        }
        if xs[1] == 0 {
            return Err(arg_err!("gru over an empty sequence"));
        }
        if let Some(h) = h0 {
            if self.shape(h) != [xs[0], hidden] {
                return Err(shape_err!("gru h0 {:?}", self.shape(h)));
            }
        }
        let lengths = match lengths {
            Some(l) => {
                if l.len() != xs[0] || l.iter().any(|&v| v == 0 || v > xs[1]) {
                    return Err(shape_err!("gru lengths {:?} for x {:?}", l, xs));
                }
                l.to_vec()
            }
            None => vec![xs[1]; xs[0]],
        };
        let dims = gru::GruDims {
            batch: xs[0],
            steps: xs[1],
            input: xs[2],
            hidden,
        };
        let (y, cache) = gru::forward(
            self.exec,
            self.value(x).data(),
            self.value(w_x).data(),
            self.value(w_h).data(),
            self.value(b).data(),
            h0.map(|h| self.value(h).data()),
            &lengths,
            dims,
        );
        let ng = self.needs(x)
            || self.needs(w_x)
            || self.needs(w_h)
            || self.needs(b)
            || h0.is_some_and(|h| self.needs(h));
        Ok(self.push(
            Tensor::from_vec(&[xs[0], xs[1], hidden], y)?,
            Op::Gru {
                x,
                w_x,
                w_h,
                b,
                h0,
                cache,
                lengths,
                dims,
            },
            ng,
        ))
    }

    /// Row `lengths[n] - 1` of every sequence in `[N, T, H]`, giving `[N, H]`.
    pub fn last_step(&mut self, seq: Var, lengths: Option<&[usize]>) -> Result<Var> {
        let s = self.shape(seq).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("last_step of {:?}", s));
        }
        let lengths = lengths.map_or_else(|| vec![s[1]; s[0]], <[usize]>::to_vec);
        if lengths.len() != s[0] || lengths.iter().any(|&l| l == 0 || l > s[1]) {
            return Err(shape_err!("last_step lengths {:?} for {:?}", lengths, s));
        }
        let (t, h) = (s[1], s[2]);
        let src = self.value(seq).data();
        let mut out = Vec::with_capacity(s[0] * h);
        for (n, &l) in lengths.iter().enumerate() {
            out.extend_from_slice(&src[(n * t + l - 1) * h..(n * t + l) * h]);
        }
        let ng = self.needs(seq);
        Ok(self.push(
            Tensor::from_vec(&[s[0], h], out)?,
            Op::LastStep { seq, lengths },
            ng,
        ))
    }

    /// `(1/N) * sum_n ||pred_n - target_n||^2` over `[N, T, J]`, counting only
    /// rows `t < lengths[n]`.
    pub fn squared_error(
        &mut self,
        pred: Var,
        target: &Tensor,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() || ps.is_empty() {
            return Err(shape_err!(
                "squared_error pred {:?} vs target {:?}",
                ps,
                target.shape()
            ));
        }
        let batch = ps[0];
        let steps = if ps.len() >= 3 { ps[1] } else { 1 };
        let rows = batch * steps;
        let row_len = target.len() / rows.max(1);
        let row_mask: Vec<bool> = (0..rows)
            .map(|r| lengths.is_none_or(|l| r % steps < l[r / steps]))
            .collect();
        let p = self.value(pred).data();
        let mut total = 0.0;
        for (r, &on) in row_mask.iter().enumerate() {
            if on {
                for i in r * row_len..(r + 1) * row_len {
                    total += (p[i] - target.data()[i]).powi(2);
                }
            }
        }
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::SquaredError {
                pred,
                target: target.data().to_vec(),
                row_mask,
                batch,
            },
            ng,
        ))
    }

    /// `-(1/N) sum w (l ln p + (1 - l) ln(1 - p))` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn weighted_bce(&mut self, pred: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(pred).len();
        if labels.len() != n || weights.len() != n || n == 0 {
            return Err(shape_err!(
                "weighted_bce over {} predictions, {} labels, {} weights",
                n,
                labels.len(),
                weights.len()
            ));
        }
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((&p, &l), &w)| {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                w * (l * pc.ln() + (1.0 - l) * (1.0 - pc).ln())
            })
            .sum();
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(-total / n as f64),
            Op::WeightedBce {
                pred,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every reachable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Input | Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let keep = |i: usize| matches!(self.nodes[i].op, Op::Input | Op::Param);
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| keep(i))
                    .map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).unwrap())
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::WeightedSum(a, w) => {
                self.accumulate(grads, *a, w.iter().map(|v| v * g[0]).collect());
            }
            Op::Relu(a) => {
                let x = val(*a);
                let gi = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, gi);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let gi = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, gi);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let gi = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, gi);
            }
            Op::GradReverse(a, lambda) => {
                self.accumulate(grads, *a, g.iter().map(|v| -lambda * v).collect());
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let r =
                    dense::backward(self.exec, val(*x), val(*w), g, ws[1], ws[0], self.needs(*x));
                if let Some(gi) = r.input {
                    self.accumulate(grads, *x, gi);
                }
                self.accumulate(grads, *w, r.weight);
                self.accumulate(grads, *b, r.bias);
            }
            Op::Conv2d {
                x,
                w,
                b,
                padded,
                dims,
            } => {
                let r = conv::backward(self.exec, padded, val(*w), g, *dims, self.needs(*x));
                if let Some(gi) = r.input {
                    self.accumulate(grads, *x, gi);
                }
                self.accumulate(grads, *w, r.weight);
                self.accumulate(grads, *b, r.bias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                lengths,
                dims,
            } => {
                let r = norm::backward(cache, val(*gamma), g, lengths.as_deref(), *dims);
                self.accumulate(grads, *x, r.input);
                self.accumulate(grads, *gamma, r.gamma);
                self.accumulate(grads, *beta, r.beta);
            }
            Op::MaxPool { x, arg } => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, pool::backward(arg, g, n));
            }
            Op::ToSequence { x } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut gi = vec![0.0; g.len()];
                for s in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            let row = ((s * c + ci) * h + hi) * w;
                            for t in 0..w {
                                gi[row + t] = g[(s * w + t) * c * h + ci * h + hi];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Gru {
                x,
                w_x,
                w_h,
                b,
                h0,
                cache,
                lengths,
                dims,
            } => {
                let r = gru::backward(
                    self.exec,
                    val(*x),
                    val(*w_x),
                    val(*w_h),
                    cache,
                    g,
                    lengths,
                    *dims,
                    self.needs(*x),
                );
                if let Some(gi) = r.input {
                    self.accumulate(grads, *x, gi);
                }
                self.accumulate(grads, *w_x, r.w_x);
                self.accumulate(grads, *w_h, r.w_h);
                self.accumulate(grads, *b, r.b);
                if let Some(h) = h0 {
                    self.accumulate(grads, *h, r.h0);
                }
            }
            Op::LastStep { seq, lengths } => {
                let s = self.shape(*seq);
                let (t, h) = (s[1], s[2]);
                let mut gi = vec![0.0; self.nodes[seq.0].value.len()];
                for (n, &l) in lengths.iter().enumerate() {
                    gi[(n * t + l - 1) * h..(n * t + l) * h]
                        .copy_from_slice(&g[n * h..(n + 1) * h]);
                }
                self.accumulate(grads, *seq, gi);
            }
            Op::SquaredError {
                pred,
                target,
                row_mask,
                batch,
            } => {
                let p = val(*pred);
                let row_len = p.len() / row_mask.len();
                let c = 2.0 * g[0] / *batch as f64;
                let mut gi = vec![0.0; p.len()];
                for (r, &on) in row_mask.iter().enumerate() {
                    if on {
                        for i in r * row_len..(r + 1) * row_len {
                            gi[i] = c * (p[i] - target[i]);
                        }
                    }
                }
                self.accumulate(grads, *pred, gi);
            }
            Op::WeightedBce {
                pred,
                labels,
                weights,
            } => {
                let p = val(*pred);
                let n = p.len() as f64;
                let gi = p
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&p, &l), &w)| {
                        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            -g[0] * w / n * (l / p - (1.0 - l) / (1.0 - p))
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, gi);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamKey, Var>,
}

impl Gradients {
    /// Gradient for an input or parameter leaf; `None` when unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key).and_then(|v| self.wrt(*v))
    }

    /// Gradients for slots `0..count` of `group`, in slot order.
    pub fn group(&self, group: u32, count: usize) -> Vec<Option<Tensor>> {
        (0..count)
            .map(|index| self.param(ParamKey { group, index }).cloned())
            .collect()
    }
}
