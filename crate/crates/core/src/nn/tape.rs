//! Reverse-mode autodiff over an append-only record of tensor operations.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward pass; node indices are therefore already in topological order and
//! [`Tape::backward`] simply walks them in reverse.

use super::Tensor;
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var> },
    Mfm { x: Var, second: Vec<bool> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm(Box<BatchNormCache>),
    MaskTime { x: Var, axis: usize, lens: Vec<usize> },
    ToSequence(Var),
    Lstm(Box<LstmCache>),
    Concat(Var, Var),
    Gap { x: Var, lens: Vec<usize> },
    CombineLayers { z: Var, raw: Var, weights: Vec<f64> },
    StackPad { items: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct BatchNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    valid: Vec<bool>,
    count: Vec<usize>,
    training: bool,
}

#[derive(Debug)]
struct LstmCache {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    lens: Vec<usize>,
    reverse: bool,
    // per (batch, time): post-activation gates [i f g o], cell state, tanh(cell)
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
}

/// Batch statistics produced by a training-mode batchnorm, for updating
/// running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Reverse-mode gradients, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ weights ⊙ x`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(Error::Shape(format!(
                "{} weights for {} values",
                weights.len(),
                t.numel()
            )));
        }
        let s = t.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", t.shape())));
        }
        let out = t.clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Affine map over the last axis: `x[.., Din] · w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        check_rank(tw, 2, "linear weight")?;
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let xin = *tx.shape().last().unwrap();
        if xin != din {
            return Err(Error::Shape(format!(
                "linear input width {xin} does not match weight {:?}",
                tw.shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::Shape(format!("linear bias must be [{dout}]")));
            }
        }
        let rows = tx.numel() / din;
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &tx.data()[r * din..(r + 1) * din];
            let yr = &mut out[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                yr.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (i, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &tw.data()[i * dout..(i + 1) * dout];
                for (y, &wv) in yr.iter_mut().zip(wrow) {
                    *y += xv * wv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Linear { x, w, b })
    }

    /// Stride-1 cross-correlation with zero "same" padding.
    /// `x: [B, Cin, H, W]`, `k: [Cout, Cin, KH, KW]` with odd KH, KW, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        check_rank(tx, 4, "conv2d input")?;
        check_rank(tk, 4, "conv2d kernel")?;
        let [bs, ci, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [co, kci, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
        if kci != ci {
            return Err(Error::Shape(format!("conv2d kernel expects {kci} input channels, got {ci}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d needs odd kernel extents, got {kh}x{kw}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::Shape(format!("conv2d bias must be [{co}]")));
            }
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = tx.data();
        let kd = tk.data();
        let mut out = vec![0.0; bs * co * h * w];
        for n in 0..bs {
            for o in 0..co {
                let plane = &mut out[(n * co + o) * h * w..(n * co + o + 1) * h * w];
                if let Some(b) = b {
                    plane.fill(self.nodes[b.0].value.data()[o]);
                }
                for c in 0..ci {
                    let xplane = &xd[(n * ci + c) * h * w..(n * ci + c + 1) * h * w];
                    for i in 0..kh {
                        let (h0, h1) = (ph.saturating_sub(i), (h + ph).saturating_sub(i).min(h));
                        for j in 0..kw {
                            let kv = kd[((o * ci + c) * kh + i) * kw + j];
                            if kv == 0.0 {
                                continue;
                            }
                            let (w0, w1) = (pw.saturating_sub(j), (w + pw).saturating_sub(j).min(w));
                            for y in h0..h1 {
                                let xr = &xplane[(y + i - ph) * w..];
                                let orow = &mut plane[y * w..(y + 1) * w];
                                for xx in w0..w1 {
                                    orow[xx] += kv * xr[xx + j - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, co, h, w], out)?;
        self.push(out, Op::Conv2d { x, k, b })
    }

    /// Max-feature-map over axis 1: `out[:, c] = max(x[:, c], x[:, c + C])`.
    /// Ties go to the first half.
    pub fn mfm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 || !t.shape()[1].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "mfm needs an even channel axis, got shape {:?}",
                t.shape()
            )));
        }
        let outer = t.shape()[0];
        let half = t.shape()[1] / 2;
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(t.numel() / 2);
        let mut second = Vec::with_capacity(t.numel() / 2);
        for n in 0..outer {
            let base = n * 2 * half * inner;
            for idx in 0..half * inner {
                let a = t.data()[base + idx];
                let b = t.data()[base + half * inner + idx];
                second.push(b > a);
                out.push(if b > a { b } else { a });
            }
        }
        let mut shape = t.shape().to_vec();
        shape[1] = half;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Mfm { x, second })
    }

    /// 2×2 max pooling with stride 2 over the last two axes of `[B, C, H, W]`;
    /// odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 4, "max_pool2 input")?;
        let [bs, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("max_pool2 on a {h}x{w} plane")));
        }
        let mut out = Vec::with_capacity(bs * c * oh * ow);
        let mut argmax = Vec::with_capacity(bs * c * oh * ow);
        for plane in 0..bs * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if t.data()[idx] > t.data()[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(t.data()[best]);
                }
            }
        }
        let out = Tensor::new(vec![bs, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Per-channel batch normalization of `[B, C, H, W]`.
    ///
    /// Only positions with time index `< lens[b]` (axis 2) take part; the rest
    /// are written as zero. Training mode normalizes with the batch statistics
    /// and returns them; otherwise `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        lens: &[usize],
        running: (&[f64], &[f64]),
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(x);
        check_rank(t, 4, "batch_norm input")?;
        let [bs, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        if lens.len() != bs {
            return Err(Error::Shape(format!("{} lengths for batch of {bs}", lens.len())));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("batch_norm affine parameters must be [{c}]")));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::Shape(format!("batch_norm running statistics must have {c} entries")));
        }
        let valid: Vec<bool> = (0..bs * c * h * w)
            .map(|idx| (idx / w) % h < lens[idx / (c * h * w)])
            .collect();
        let mut count = vec![0usize; c];
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (idx, &v) in t.data().iter().enumerate() {
            if valid[idx] {
                let ch = (idx / (h * w)) % c;
                count[ch] += 1;
                mean[ch] += v;
            }
        }
        let stats = if training {
            for ch in 0..c {
                if count[ch] < 2 {
                    return Err(Error::Shape("batch_norm needs at least two valid positions per channel".into()));
                }
                mean[ch] /= count[ch] as f64;
            }
            for (idx, &v) in t.data().iter().enumerate() {
                if valid[idx] {
                    let ch = (idx / (h * w)) % c;
                    var[ch] += (v - mean[ch]).powi(2);
                }
            }
            for ch in 0..c {
                var[ch] /= count[ch] as f64;
            }
            let unbiased = (0..c)
                .map(|ch| var[ch] * count[ch] as f64 / (count[ch] - 1) as f64)
                .collect();
            Some(BatchStats { mean: mean.clone(), var: unbiased })
        } else {
            mean.copy_from_slice(running.0);
            var.copy_from_slice(running.1);
            None
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut x_hat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for (idx, &v) in t.data().iter().enumerate() {
            if valid[idx] {
                let ch = (idx / (h * w)) % c;
                x_hat[idx] = (v - mean[ch]) * inv_std[ch];
                out[idx] = g[ch] * x_hat[idx] + bt[ch];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let cache = BatchNormCache { x, gamma, beta, x_hat, inv_std, valid, count, training };
        let var = self.push(out, Op::BatchNorm(Box::new(cache)))?;
        Ok((var, stats))
    }

    /// Zeroes every position whose index along `axis` is `>= lens[b]`.
    pub fn mask_time(&mut self, x: Var, axis: usize, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if axis == 0 || axis >= t.shape().len() || lens.len() != t.shape()[0] {
            return Err(Error::Shape(format!(
                "mask_time axis {axis} with {} lengths on shape {:?}",
                lens.len(),
                t.shape()
            )));
        }
        let extent = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let per_item = t.numel() / t.shape()[0];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let time = (idx / inner) % extent;
                if time < lens[idx / per_item] {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::MaskTime { x, axis, lens: lens.to_vec() })
    }

    /// `[B, C, T, F] -> [B, T, C·F]`, feature index `c·F + f`.
    pub fn to_sequence(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 4, "to_sequence input")?;
        let [bs, c, tt, f] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let mut out = vec![0.0; t.numel()];
        for n in 0..bs {
            for ch in 0..c {
                for time in 0..tt {
                    for fr in 0..f {
                        out[(n * tt + time) * c * f + ch * f + fr] = t.data()[((n * c + ch) * tt + time) * f + fr];
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, tt, c * f], out)?;
        self.push(out, Op::ToSequence(x))
    }

    /// One LSTM direction over `x: [B, T, D]` using the first `lens[b]` frames.
    /// `w_ih: [D, 4H]`, `w_hh: [H, 4H]`, `b: [4H]`, gate order i, f, g, o.
    /// Output `[B, T, H]`, zero past each item's length.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, lens: &[usize], reverse: bool) -> Result<Var> {
        let tx = self.value(x);
        check_rank(tx, 3, "lstm input")?;
        let [bs, tt, d] = [tx.shape()[0], tx.shape()[1], tx.shape()[2]];
        let twh = self.value(w_hh);
        check_rank(twh, 2, "lstm w_hh")?;
        let hd = twh.shape()[0];
        if twh.shape()[1] != 4 * hd
            || self.value(w_ih).shape() != [d, 4 * hd]
            || self.value(b).shape() != [4 * hd]
        {
            return Err(Error::Shape(format!(
                "lstm parameters inconsistent with input width {d} and hidden {hd}"
            )));
        }
        if lens.len() != bs || lens.iter().any(|&l| l > tt) {
            return Err(Error::Shape(format!("lstm lengths {lens:?} for shape {:?}", tx.shape())));
        }
        let xd = tx.data();
        let wi = self.value(w_ih).data();
        let wh = self.value(w_hh).data();
        let bias = self.value(b).data();
        let g4 = 4 * hd;
        let mut out = vec![0.0; bs * tt * hd];
        let mut gates = vec![0.0; bs * tt * g4];
        let mut cell = vec![0.0; bs * tt * hd];
        let mut tanh_cell = vec![0.0; bs * tt * hd];
        let mut pre = vec![0.0; g4];
        for n in 0..bs {
            let mut h_prev = vec![0.0; hd];
            let mut c_prev = vec![0.0; hd];
            for step in 0..lens[n] {
                let time = if reverse { lens[n] - 1 - step } else { step };
                let row = n * tt + time;
                pre.copy_from_slice(bias);
                for (di, &xv) in xd[row * d..(row + 1) * d].iter().enumerate() {
                    for (p, &wv) in pre.iter_mut().zip(&wi[di * g4..(di + 1) * g4]) {
                        *p += xv * wv;
                    }
                }
                for (k, &hv) in h_prev.iter().enumerate() {
                    for (p, &wv) in pre.iter_mut().zip(&wh[k * g4..(k + 1) * g4]) {
                        *p += hv * wv;
                    }
                }
                let gs = &mut gates[row * g4..(row + 1) * g4];
                for j in 0..hd {
                    let (i, f, g, o) = (
                        sigmoid(pre[j]),
                        sigmoid(pre[hd + j]),
                        pre[2 * hd + j].tanh(),
                        sigmoid(pre[3 * hd + j]),
                    );
                    gs[j] = i;
                    gs[hd + j] = f;
                    gs[2 * hd + j] = g;
                    gs[3 * hd + j] = o;
                    let c = f * c_prev[j] + i * g;
                    let tc = c.tanh();
                    cell[row * hd + j] = c;
                    tanh_cell[row * hd + j] = tc;
                    out[row * hd + j] = o * tc;
                }
                c_prev.copy_from_slice(&cell[row * hd..(row + 1) * hd]);
                h_prev.copy_from_slice(&out[row * hd..(row + 1) * hd]);
            }
        }
        let out = Tensor::new(vec![bs, tt, hd], out)?;
        let cache = LstmCache { x, w_ih, w_hh, b, lens: lens.to_vec(), reverse, gates, cell, tanh_cell };
        self.push(out, Op::Lstm(Box::new(cache)))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.shape().len(), tb.shape().len());
        if ra != rb || ta.shape()[..ra - 1] != tb.shape()[..rb - 1] {
            return Err(Error::Shape(format!("concat {:?} with {:?}", ta.shape(), tb.shape())));
        }
        let (wa, wb) = (ta.shape()[ra - 1], tb.shape()[rb - 1]);
        let rows = ta.numel() / wa;
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&tb.data()[r * wb..(r + 1) * wb]);
        }
        let mut shape = ta.shape().to_vec();
        shape[ra - 1] = wa + wb;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Concat(a, b))
    }

    /// Mean of the first `lens[b]` frames of `x: [B, T, D]`, giving `[B, D]`.
    pub fn global_avg_pool(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_rank(t, 3, "global_avg_pool input")?;
        let [bs, tt, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        if lens.len() != bs {
            return Err(Error::Shape(format!("{} lengths for batch of {bs}", lens.len())));
        }
        if let Some(&bad) = lens.iter().find(|&&l| l == 0 || l > tt) {
            return Err(Error::Param(format!("valid length {bad} outside 1..={tt}")));
        }
        let mut out = vec![0.0; bs * d];
        for n in 0..bs {
            for time in 0..lens[n] {
                for (o, &v) in out[n * d..(n + 1) * d]
                    .iter_mut()
                    .zip(&t.data()[(n * tt + time) * d..(n * tt + time + 1) * d])
                {
                    *o += v;
                }
            }
            for o in &mut out[n * d..(n + 1) * d] {
                *o /= lens[n] as f64;
            }
        }
        let out = Tensor::new(vec![bs, d], out)?;
        self.push(out, Op::Gap { x, lens: lens.to_vec() })
    }

    /// `Σ_k softmax(raw)_k · z[k]` for `z: [K, N, D]`, `raw: [K]`.
    pub fn combine_layers(&mut self, z: Var, raw: Var) -> Result<Var> {
        let (tz, tr) = (self.value(z), self.value(raw));
        check_rank(tz, 3, "combine_layers input")?;
        let k = tz.shape()[0];
        if tr.shape() != [k] {
            return Err(Error::Shape(format!(
                "{} layer weights for {k} layers",
                tr.numel()
            )));
        }
        let weights = softmax(tr.data());
        let per = tz.numel() / k;
        let mut out = vec![0.0; per];
        for (layer, &wk) in weights.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&tz.data()[layer * per..(layer + 1) * per]) {
                *o += wk * v;
            }
        }
        let out = Tensor::new(tz.shape()[1..].to_vec(), out)?;
        self.push(out, Op::CombineLayers { z, raw, weights })
    }

    /// Stacks `[N_i, D]` items into `[B, max N_i, D]`, zero padded.
    pub fn stack_pad(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Shape("stack_pad of an empty batch".into()));
        }
        let d = *self.value(items[0]).shape().last().unwrap();
        let mut max_n = 0;
        for &it in items {
            let t = self.value(it);
            check_rank(t, 2, "stack_pad item")?;
            if t.shape()[1] != d {
                return Err(Error::Shape(format!("stack_pad widths {d} and {}", t.shape()[1])));
            }
            max_n = max_n.max(t.shape()[0]);
        }
        let mut out = vec![0.0; items.len() * max_n * d];
        for (n, &it) in items.iter().enumerate() {
            let src = self.value(it).data();
            out[n * max_n * d..n * max_n * d + src.len()].copy_from_slice(src);
        }
        let out = Tensor::new(vec![items.len(), max_n, d], out)?;
        self.push(out, Op::StackPad { items: items.to_vec() })
    }

    /// Mean negative log-softmax of the labelled class over a `[B, C]` batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        check_rank(t, 2, "cross_entropy logits")?;
        let [bs, c] = [t.shape()[0], t.shape()[1]];
        if labels.len() != bs || labels.iter().any(|&l| l >= c) {
            return Err(Error::Shape(format!("labels {labels:?} for logits {:?}", t.shape())));
        }
        let mut probs = Vec::with_capacity(bs * c);
        let mut loss = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            let row = &t.data()[n * c..(n + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / bs as f64);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |var: Var, data: Vec<f64>| {
            let shape = self.value(var).shape();
            let t = Tensor::new(shape.to_vec(), data).expect("gradient shape");
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Scale(x, f) => acc(*x, gd.iter().map(|v| v * f).collect()),
            Op::Sum(x) => acc(*x, vec![gd[0]; self.value(*x).numel()]),
            Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|w| w * gd[0]).collect()),
            Op::Reshape(x) => acc(*x, gd.to_vec()),
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / din;
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; dout];
                for r in 0..rows {
                    let gr = &gd[r * dout..(r + 1) * dout];
                    let xr = &tx.data()[r * din..(r + 1) * din];
                    for (o, &gv) in gr.iter().enumerate() {
                        db[o] += gv;
                    }
                    for i in 0..din {
                        let wrow = &tw.data()[i * dout..(i + 1) * dout];
                        dx[r * din + i] = wrow.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let dwrow = &mut dw[i * dout..(i + 1) * dout];
                        for (dwv, &gv) in dwrow.iter_mut().zip(gr) {
                            *dwv += xr[i] * gv;
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, k, b } => {
                let (tx, tk) = (self.value(*x), self.value(*k));
                let [bs, ci, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let [co, _, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
                let (ph, pw) = (kh / 2, kw / 2);
                let (xd, kd) = (tx.data(), tk.data());
                let mut dx = vec![0.0; tx.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let mut db = vec![0.0; co];
                for n in 0..bs {
                    for o in 0..co {
                        let gplane = &gd[(n * co + o) * h * w..(n * co + o + 1) * h * w];
                        db[o] += gplane.iter().sum::<f64>();
                        for c in 0..ci {
                            let xoff = (n * ci + c) * h * w;
                            for i in 0..kh {
                                let (h0, h1) = (ph.saturating_sub(i), (h + ph).saturating_sub(i).min(h));
                                for j in 0..kw {
                                    let kidx = ((o * ci + c) * kh + i) * kw + j;
                                    let kv = kd[kidx];
                                    let (w0, w1) = (pw.saturating_sub(j), (w + pw).saturating_sub(j).min(w));
                                    let mut dkv = 0.0;
                                    for y in h0..h1 {
                                        let xrow = xoff + (y + i - ph) * w + j;
                                        let grow = &gplane[y * w..(y + 1) * w];
                                        for xx in w0..w1 {
                                            dkv += grow[xx] * xd[xrow + xx - pw];
                                            dx[xrow + xx - pw] += kv * grow[xx];
                                        }
                                    }
                                    dk[kidx] += dkv;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*k, dk);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Mfm { x, second } => {
                let tx = self.value(*x);
                let outer = tx.shape()[0];
                let half_inner = gd.len() / outer;
                let mut dx = vec![0.0; tx.numel()];
                for n in 0..outer {
                    for idx in 0..half_inner {
                        let o = n * half_inner + idx;
                        let target = n * 2 * half_inner + idx + if second[o] { half_inner } else { 0 };
                        dx[target] += gd[o];
                    }
                }
                acc(*x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNorm(cache) => {
                let tx = self.value(cache.x);
                let c = tx.shape()[1];
                let hw = tx.shape()[2] * tx.shape()[3];
                let gamma = self.value(cache.gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, &gv) in gd.iter().enumerate() {
                    if cache.valid[idx] {
                        let ch = (idx / hw) % c;
                        dgamma[ch] += gv * cache.x_hat[idx];
                        dbeta[ch] += gv;
                    }
                }
                let mut dx = vec![0.0; tx.numel()];
                for (idx, &gv) in gd.iter().enumerate() {
                    if !cache.valid[idx] {
                        continue;
                    }
                    let ch = (idx / hw) % c;
                    dx[idx] = if cache.training {
                        let m = cache.count[ch] as f64;
                        // with dxhat = g·γ: Σdxhat = γ·dβ, Σ dxhat·xhat = γ·dγ
                        gamma[ch] * cache.inv_std[ch] / m
                            * (m * gv - dbeta[ch] - cache.x_hat[idx] * dgamma[ch])
                    } else {
                        gv * gamma[ch] * cache.inv_std[ch]
                    };
                }
                acc(cache.x, dx);
                acc(cache.gamma, dgamma);
                acc(cache.beta, dbeta);
            }
            Op::MaskTime { x, axis, lens } => {
                let tx = self.value(*x);
                let extent = tx.shape()[*axis];
                let inner: usize = tx.shape()[axis + 1..].iter().product();
                let per_item = tx.numel() / tx.shape()[0];
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| if (idx / inner) % extent < lens[idx / per_item] { v } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::ToSequence(x) => {
                let tx = self.value(*x);
                let [bs, c, tt, f] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let mut dx = vec![0.0; tx.numel()];
                for n in 0..bs {
                    for ch in 0..c {
                        for time in 0..tt {
                            for fr in 0..f {
                                dx[((n * c + ch) * tt + time) * f + fr] = gd[(n * tt + time) * c * f + ch * f + fr];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Lstm(cache) => {
                let (dx, dwi, dwh, db) = self.lstm_backward(cache, gd);
                acc(cache.x, dx);
                acc(cache.w_ih, dwi);
                acc(cache.w_hh, dwh);
                acc(cache.b, db);
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let wa = *ta.shape().last().unwrap();
                let wb = *tb.shape().last().unwrap();
                let rows = ta.numel() / wa;
                let mut da = Vec::with_capacity(ta.numel());
                let mut dbv = Vec::with_capacity(tb.numel());
                for r in 0..rows {
                    let row = &gd[r * (wa + wb)..(r + 1) * (wa + wb)];
                    da.extend_from_slice(&row[..wa]);
                    dbv.extend_from_slice(&row[wa..]);
                }
                acc(*a, da);
                acc(*b, dbv);
            }
            Op::Gap { x, lens } => {
                let tx = self.value(*x);
                let [bs, tt, d] = [tx.shape()[0], tx.shape()[1], tx.shape()[2]];
                let mut dx = vec![0.0; tx.numel()];
                for n in 0..bs {
                    for time in 0..lens[n] {
                        for j in 0..d {
                            dx[(n * tt + time) * d + j] = gd[n * d + j] / lens[n] as f64;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CombineLayers { z, raw, weights } => {
                let tz = self.value(*z);
                let k = weights.len();
                let per = tz.numel() / k;
                let mut dz = Vec::with_capacity(tz.numel());
                let mut s = vec![0.0; k];
                for layer in 0..k {
                    let zl = &tz.data()[layer * per..(layer + 1) * per];
                    s[layer] = zl.iter().zip(gd).map(|(a, b)| a * b).sum();
                    dz.extend(gd.iter().map(|gv| gv * weights[layer]));
                }
                let mean: f64 = weights.iter().zip(&s).map(|(w, sv)| w * sv).sum();
                let draw = weights.iter().zip(&s).map(|(w, sv)| w * (sv - mean)).collect();
                acc(*z, dz);
                acc(*raw, draw);
            }
            Op::StackPad { items } => {
                let max_n = node.value.shape()[1];
                let d = node.value.shape()[2];
                for (n, &it) in items.iter().enumerate() {
                    let len = self.value(it).numel();
                    acc(it, gd[n * max_n * d..n * max_n * d + len].to_vec());
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let bs = labels.len();
                let c = probs.len() / bs;
                let mut dl = probs.clone();
                for (n, &label) in labels.iter().enumerate() {
                    dl[n * c + label] -= 1.0;
                }
                acc(*logits, dl.into_iter().map(|v| v * gd[0] / bs as f64).collect());
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn lstm_backward(&self, cache: &LstmCache, gd: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let tx = self.value(cache.x);
        let [bs, tt, d] = [tx.shape()[0], tx.shape()[1], tx.shape()[2]];
        let wi = self.value(cache.w_ih).data();
        let wh = self.value(cache.w_hh).data();
        let hd = self.value(cache.w_hh).shape()[0];
        let g4 = 4 * hd;
        let mut dx = vec![0.0; tx.numel()];
        let mut dwi = vec![0.0; wi.len()];
        let mut dwh = vec![0.0; wh.len()];
        let mut db = vec![0.0; g4];
        let mut da = vec![0.0; g4];
        for n in 0..bs {
            let len = cache.lens[n];
            let time_of = |step: usize| if cache.reverse { len - 1 - step } else { step };
            let mut dh_next = vec![0.0; hd];
            let mut dc_next = vec![0.0; hd];
            for step in (0..len).rev() {
                let row = n * tt + time_of(step);
                let prev = (step > 0).then(|| n * tt + time_of(step - 1));
                let gs = &cache.gates[row * g4..(row + 1) * g4];
                for j in 0..hd {
                    let (i, f, g, o) = (gs[j], gs[hd + j], gs[2 * hd + j], gs[3 * hd + j]);
                    let tc = cache.tanh_cell[row * hd + j];
                    let c_prev = prev.map_or(0.0, |p| cache.cell[p * hd + j]);
                    let dh = gd[row * hd + j] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                    dc_next[j] = dc * f;
                    da[j] = dc * g * i * (1.0 - i);
                    da[hd + j] = dc * c_prev * f * (1.0 - f);
                    da[2 * hd + j] = dc * i * (1.0 - g * g);
                    da[3 * hd + j] = d_o * o * (1.0 - o);
                }
                for (dbv, &a) in db.iter_mut().zip(&da) {
                    *dbv += a;
                }
                let xr = &tx.data()[row * d..(row + 1) * d];
                for di in 0..d {
                    let wrow = &wi[di * g4..(di + 1) * g4];
                    dx[row * d + di] += wrow.iter().zip(&da).map(|(a, b)| a * b).sum::<f64>();
                    for (dw, &a) in dwi[di * g4..(di + 1) * g4].iter_mut().zip(&da) {
                        *dw += xr[di] * a;
                    }
                }
                for k in 0..hd {
                    let wrow = &wh[k * g4..(k + 1) * g4];
                    dh_next[k] = wrow.iter().zip(&da).map(|(a, b)| a * b).sum();
                    if let Some(p) = prev {
                        let h_prev = cache.tanh_cell[p * hd + k] * cache.gates[p * g4 + 3 * hd + k];
                        for (dw, &a) in dwh[k * g4..(k + 1) * g4].iter_mut().zip(&da) {
                            *dw += h_prev * a;
                        }
                    }
                }
            }
        }
        (dx, dwi, dwh, db)
    }
}

pub(crate) fn softmax(raw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(raw);
    raw.iter().map(|v| (v - lse).exp()).collect()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Reshape(_) => "reshape",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::Mfm { .. } => "mfm",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::BatchNorm(_) => "batch_norm",
        Op::MaskTime { .. } => "mask_time",
        Op::ToSequence(_) => "to_sequence",
        Op::Lstm(_) => "lstm",
        Op::Concat(..) => "concat",
        Op::Gap { .. } => "global_avg_pool",
        Op::CombineLayers { .. } => "combine_layers",
        Op::StackPad { .. } => "stack_pad",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}
