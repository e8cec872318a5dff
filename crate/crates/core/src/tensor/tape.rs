//! Gradient tape. Values live in an arena indexed by [`Var`]; each recorded
//! op keeps exactly the intermediates its backward pass needs.

use super::kernels::{col2im, gemm, im2col, sigmoid};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f32 = 1e-7;

/// How batch normalization obtains its statistics.
pub enum BnMode<'a> {
    /// Normalize by batch statistics over `(N, H, W)` and fold them into the
    /// running estimates with an exponential moving average.
    Train {
        running_mean: &'a mut [f32],
        running_var: &'a mut [f32],
        momentum: f32,
    },
    /// Normalize by the stored running statistics.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        ksize: usize,
        /// im2col buffers, one `(cin·k·k)×(h·w)` block per batch entry.
        cols: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Sigmoid {
        input: Var,
    },
    Bce {
        prob: Var,
        target: Vec<f32>,
    },
    WeightedSum {
        input: Var,
        weights: Option<Vec<f32>>,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Add {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of forward computations.
///
/// Nodes are appended as ops execute, so every node's inputs precede it.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only computes values; [`Tape::backward`] is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad && self.grad_enabled, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Moves the value out of the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|&v| self.rg(v))
    }

    fn finish(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, requires_grad, op))
    }

    /// Stride-1 cross-correlation with zero padding `k / 2` (size-preserving)
    /// for `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).shape();
        let [cout, wcin, kh, kw] = self.value(weight).shape();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Config(format!(
                "conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if self.value(bias).len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries, expected {cout}", self.value(bias).len()),
            ));
        }
        let k = kh;
        let kdim = cin * k * k;
        let hw = h * w;
        let requires_grad = self.record(&[input, weight, bias]);
        let mut cols = vec![0.0f32; n * kdim * hw];
        let mut out = vec![0.0f32; n * cout * hw];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for bi in 0..n {
                let col = &mut cols[bi * kdim * hw..(bi + 1) * kdim * hw];
                im2col(&x[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, k, col);
                let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
                gemm(cout, kdim, hw, wt, false, col, false, o, 0.0);
                for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                    let bv = b[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        if !requires_grad {
            cols = Vec::new();
        }
        let value = Tensor::new([n, cout, h, w], out)?;
        self.finish(
            value,
            requires_grad,
            Op::Conv2d {
                input,
                weight,
                bias,
                ksize: k,
                cols,
            },
            "conv2d",
        )
    }

    /// Per-channel batch normalization followed by the affine `gamma·x̂ + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f32,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).shape();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, affine params do not match"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config("batch_norm eps must be positive".into()));
        }
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input).data();
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        let batch_stats = matches!(mode, BnMode::Train { .. });
        match mode {
            BnMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                if m <= 1 {
                    return Err(Error::DegenerateBatch("batch_norm".into()));
                }
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for bi in 0..n {
                        let base = (bi * c + ch) * hw;
                        sum += x[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = sum / m as f64;
                    let mut sq = 0.0f64;
                    for bi in 0..n {
                        let base = (bi * c + ch) * hw;
                        sq += x[base..base + hw]
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let var = sq / m as f64;
                    mean[ch] = mu as f32;
                    inv_std[ch] = (1.0 / (var + eps as f64).sqrt()) as f32;
                    let unbiased = sq / (m - 1) as f64;
                    running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu as f32;
                    running_var[ch] =
                        (1.0 - momentum) * running_var[ch] + momentum * unbiased as f32;
                }
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                for ch in 0..c {
                    mean[ch] = running_mean[ch];
                    // Aggregated (e.g. noised) variances can dip below zero.
                    inv_std[ch] = 1.0 / (running_var[ch].max(0.0) + eps).sqrt();
                }
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (mu, is, gv, bv) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + hw {
                    let xh = (x[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = gv * xh + bv;
                }
            }
        }
        let requires_grad = self.record(&[input, gamma, beta]);
        if !requires_grad {
            xhat = Vec::new();
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.finish(
            value,
            requires_grad,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            "batch_norm",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.record(&[input]);
        self.finish(value, rg, Op::Relu { input }, "relu")
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major order of the window.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "max_pool2 needs even spatial size, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = base + 2 * y * w + 2 * xo;
                    let mut best = xd[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xo + dx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                    let o = (plane * oh + y) * ow + xo;
                    out[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.record(&[input]);
        self.finish(value, rg, Op::MaxPool2 { input, argmax }, "max_pool2")
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                let src = &xd[(plane * h + y / 2) * w..(plane * h + y / 2 + 1) * w];
                let dst = &mut out[(plane * oh + y) * ow..(plane * oh + y + 1) * ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.record(&[input]);
        self.finish(value, rg, Op::Upsample2 { input }, "upsample_nearest2")
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", [na, ca, ha, wa], [nb, cb, hb, wb]),
            ));
        }
        let hw = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for bi in 0..na {
            out.extend_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let value = Tensor::new([na, ca + cb, ha, wa], out)?;
        let rg = self.record(&[a, b]);
        self.finish(value, rg, Op::Concat { a, b }, "concat_channels")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.record(&[input]);
        self.finish(value, rg, Op::Sigmoid { input }, "sigmoid")
    }

    /// Mean pixel-wise binary cross-entropy. Probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&mut self, prob: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(prob);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "bce_loss",
                format!("prob {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("bce target value {bad} is not 0 or 1")));
        }
        let loss = bce_mean(p.data(), target.data());
        let rg = self.record(&[prob]);
        let saved = if rg { target.data().to_vec() } else { Vec::new() };
        self.finish(
            Tensor::scalar(loss as f32),
            rg,
            Op::Bce {
                prob,
                target: saved,
            },
            "bce_loss",
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.record(&[input]);
        self.finish(
            Tensor::scalar(s as f32),
            rg,
            Op::WeightedSum {
                input,
                weights: None,
            },
            "sum",
        )
    }

    /// `Σ_i weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f32]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return Err(Error::shape("weighted_sum", "weights length"));
        }
        let s: f64 = x
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.record(&[input]);
        let weights = rg.then(|| weights.to_vec());
        self.finish(
            Tensor::scalar(s as f32),
            rg,
            Op::WeightedSum { input, weights },
            "weighted_sum",
        )
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.record(&[input]);
        self.finish(value, rg, Op::Scale { input, factor }, "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.record(&[a, b]);
        self.finish(value, rg, Op::Add { a, b }, "add")
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient of its own shape (zeros when the
    /// loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape();
                let data = g.unwrap_or_else(|| vec![0.0; numel(shape)]);
                Some(Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                ksize,
                cols,
            } => {
                let [n, cin, h, w] = self.value(*input).shape();
                let cout = self.value(*weight).shape()[0];
                let k = *ksize;
                let kdim = cin * k * k;
                let hw = h * w;
                self.accumulate(grads, *bias, |db| {
                    for bi in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = (bi * cout + co) * hw;
                            *d += g[base..base + hw].iter().sum::<f32>();
                        }
                    }
                });
                self.accumulate(grads, *weight, |dw| {
                    for bi in 0..n {
                        let go = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let col = &cols[bi * kdim * hw..(bi + 1) * kdim * hw];
                        gemm(cout, hw, kdim, go, false, col, true, dw, 1.0);
                    }
                });
                let wt = self.value(*weight).data();
                self.accumulate(grads, *input, |dx| {
                    let mut dcol = vec![0.0f32; kdim * hw];
                    for bi in 0..n {
                        let go = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        gemm(kdim, cout, hw, wt, true, go, false, &mut dcol, 0.0);
                        col2im(
                            &dcol,
                            cin,
                            h,
                            w,
                            k,
                            &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
                        );
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.value(*input).shape();
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] as f64 * xhat[i] as f64;
                            dbeta[ch] += g[i] as f64;
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *input, |dx| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_dy = (dbeta[ch] / m) as f32;
                                let mean_dyx = (dgamma[ch] / m) as f32;
                                for i in base..base + hw {
                                    dx[i] += scale * (g[i] - mean_dy - xhat[i] * mean_dyx);
                                }
                            } else {
                                for i in base..base + hw {
                                    dx[i] += scale * g[i];
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |d| {
                    d.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += *b as f32)
                });
                self.accumulate(grads, *beta, |d| {
                    d.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += *b as f32)
                });
            }
            Op::Relu { input } => {
                let y = node.value.data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (&gv, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gv;
                    }
                });
            }
            Op::Upsample2 { input } => {
                let [_, _, h, w] = self.value(*input).shape();
                let ow = 2 * w;
                self.accumulate(grads, *input, |dx| {
                    for (plane, dplane) in dx.chunks_exact_mut(h * w).enumerate() {
                        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        for y in 0..2 * h {
                            for xo in 0..ow {
                                dplane[(y / 2) * w + xo / 2] += gp[y * ow + xo];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                self.accumulate(grads, *a, |da| {
                    for bi in 0..n {
                        let src = &g[bi * stride..bi * stride + ca * hw];
                        da[bi * ca * hw..(bi + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for bi in 0..n {
                        let src = &g[bi * stride + ca * hw..(bi + 1) * stride];
                        db[bi * cb * hw..(bi + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Bce { prob, target } => {
                let p = self.value(*prob).data();
                let scale = g[0] / p.len() as f32;
                // Evaluated at the clamped probability so saturated pixels
                // still receive a corrective gradient.
                self.accumulate(grads, *prob, |dp| {
                    for ((d, &pv), &y) in dp.iter_mut().zip(p).zip(target) {
                        let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        *d += scale * ((1.0 - y) / (1.0 - pc) - y / pc);
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                let gv = g[0];
                self.accumulate(grads, *input, |dx| match weights {
                    None => dx.iter_mut().for_each(|d| *d += gv),
                    Some(ws) => dx.iter_mut().zip(ws).for_each(|(d, w)| *d += gv * w),
                });
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor)
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
    }
}

/// Mean BCE over paired probability/target buffers, accumulated in `f64`.
pub fn bce_mean(prob: &[f32], target: &[f32]) -> f64 {
    let lo = PROB_CLAMP as f64;
    let total: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(lo, 1.0 - lo);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / prob.len() as f64
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
