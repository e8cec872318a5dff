//! Straightforward `f64` reference implementations of every network op,
//! written independently of the library kernels. Finite differences on
//! these are the oracle for the tape's analytic gradients.

#![allow(dead_code)]

pub mod gradcheck;

use fedseg_core::model::{ModelConfig, ParamSet, UNet};

pub const BN_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> T64 {
        T64::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Stride-1 convolution, zero padding `k / 2`. `w` is `[cout, cin, k, k]`.
pub fn conv2d(x: &T64, w: &[f64], b: &[f64], cout: usize, k: usize) -> T64 {
    let [n, cin, h, wd] = x.shape;
    assert_eq!(w.len(), cout * cin * k * k);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for ni in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xo in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xo as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * k + ky) * k + kx]
                                    * x.at(ni, ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[((ni * cout + co) * h + y) * wd + xo] = acc;
                }
            }
        }
    }
    T64::new([n, cout, h, wd], out)
}

/// Per-channel `(mean, biased variance)` over `(N, H, W)`.
pub fn channel_stats(x: &T64) -> Vec<(f64, f64)> {
    let [n, c, h, w] = x.shape;
    let m = (n * h * w) as f64;
    (0..c)
        .map(|ci| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|ni| (0..h).flat_map(move |y| (0..w).map(move |xx| (ni, y, xx))))
                .map(|(ni, y, xx)| x.at(ni, ci, y, xx))
                .collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            (mean, var)
        })
        .collect()
}

fn normalize(x: &T64, stats: &[(f64, f64)], gamma: &[f64], beta: &[f64]) -> T64 {
    let [n, c, h, w] = x.shape;
    let mut out = x.data.clone();
    for ni in 0..n {
        for ci in 0..c {
            let (mean, var) = stats[ci];
            let inv = 1.0 / (var + BN_EPS).sqrt();
            for i in 0..h * w {
                let idx = (ni * c + ci) * h * w + i;
                out[idx] = gamma[ci] * (x.data[idx] - mean) * inv + beta[ci];
            }
        }
    }
    T64::new(x.shape, out)
}

pub fn batch_norm_train(x: &T64, gamma: &[f64], beta: &[f64]) -> T64 {
    normalize(x, &channel_stats(x), gamma, beta)
}

pub fn batch_norm_eval(x: &T64, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> T64 {
    let stats: Vec<(f64, f64)> = mean.iter().zip(var).map(|(&m, &v)| (m, v.max(0.0))).collect();
    normalize(x, &stats, gamma, beta)
}

pub fn relu(x: &T64) -> T64 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &T64) -> T64 {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn max_pool2(x: &T64) -> T64 {
    let [n, c, h, w] = x.shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.at(ni, ci, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
            }
        }
    }
    T64::new([n, c, ho, wo], out)
}

pub fn upsample2(x: &T64) -> T64 {
    let [n, c, h, w] = x.shape;
    let mut out = Vec::with_capacity(n * c * h * w * 4);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x.at(ni, ci, y / 2, xx / 2));
                }
            }
        }
    }
    T64::new([n, c, 2 * h, 2 * w], out)
}

pub fn concat(a: &T64, b: &T64) -> T64 {
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for ni in 0..n {
        out.extend_from_slice(&a.data[ni * ca * h * w..(ni + 1) * ca * h * w]);
        out.extend_from_slice(&b.data[ni * cb * h * w..(ni + 1) * cb * h * w]);
    }
    T64::new([n, ca + cb, h, w], out)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(prob: &[f64], target: &[f64]) -> f64 {
    prob.iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / prob.len() as f64
}

/// Reference U-Net forward with batch statistics, reading weights from
/// `values` through the segment names of `params`.
pub fn unet_forward_train(params: &ParamSet, values: &[f64], x: &T64) -> T64 {
    let seg = |name: &str| -> &[f64] {
        let s = params.segment(name).unwrap_or_else(|| panic!("segment {name}"));
        &values[s.offset..s.offset + s.len]
    };
    let block = |name: &str, x: &T64| -> T64 {
        let b = seg(&format!("{name}.bias"));
        let y = conv2d(x, seg(&format!("{name}.weight")), b, b.len(), 3);
        relu(&batch_norm_train(
            &y,
            seg(&format!("{name}.bn.gamma")),
            seg(&format!("{name}.bn.beta")),
        ))
    };
    let e1 = block("enc1.conv_b", &block("enc1.conv_a", x));
    let e2 = block("enc2.conv_b", &block("enc2.conv_a", &max_pool2(&e1)));
    let m = block("mid.conv_b", &block("mid.conv_a", &max_pool2(&e2)));
    let d2 = block("dec2.conv_b", &block("dec2.conv_a", &concat(&upsample2(&m), &e2)));
    let d1 = block("dec1.conv_b", &block("dec1.conv_a", &concat(&upsample2(&d2), &e1)));
    let hb = seg("head.bias");
    sigmoid(&conv2d(&d1, seg("head.weight"), hb, hb.len(), 1))
}

/// Closed-form parameter count of the U-Net for base width `b`, single
/// input and output channel.
pub fn unet_param_count(b: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + 4 * cout;
    block(1, b)
        + block(b, b)
        + block(b, 2 * b)
        + block(2 * b, 2 * b)
        + block(2 * b, 4 * b)
        + block(4 * b, 2 * b)
        + block(4 * b, 2 * b)
        + block(2 * b, b)
        + block(2 * b, b)
        + block(b, b)
        + conv(b, 1, 1)
}

pub fn layout_params(b: usize) -> usize {
    UNet::new(ModelConfig::with_base(b)).unwrap().param_count()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] -= 2.0 * h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

use fedseg_core::data::{federation_plan, generate_federation, Federation, Scale};
use fedseg_core::fl::TrainConfig;
use fedseg_core::metrics::ExperimentHistory;

/// The benchmark's five client specs at 16×16 with `train[k]` training
/// slices each and `eval` test and shadow slices.
pub fn small_federation(seed: u64, train: &[usize], eval: usize) -> Federation {
    let mut plan = federation_plan(Scale::Desk, (16, 16));
    plan.clients.truncate(train.len());
    for (c, &n) in plan.clients.iter_mut().zip(train) {
        c.n_train = n;
    }
    plan.test_count = eval;
    plan.shadow_count = eval;
    generate_federation(seed, &plan).unwrap()
}

/// Desk optimizer with `rounds` rounds and a cap on local steps.
pub fn quick_train(rounds: usize, max_steps: Option<usize>) -> TrainConfig {
    TrainConfig {
        rounds,
        batch_size: 8,
        max_local_steps: max_steps,
        ..TrainConfig::desk()
    }
}

/// `(round, dice, ce, auc)` of every record; the wall-clock column is left
/// out so histories from different runs compare exactly.
pub fn history_key(h: &ExperimentHistory) -> Vec<(usize, u64, u64, Option<u64>)> {
    h.records
        .iter()
        .map(|r| (r.round, r.dice.to_bits(), r.ce_loss.to_bits(), r.mia_auc.map(f64::to_bits)))
        .collect()
}
