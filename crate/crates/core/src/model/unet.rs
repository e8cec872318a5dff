use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Segment, SegmentKind};
use crate::error::{Error, Result};
use crate::rng::{label, substream};
use crate::tensor::{BnMode, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Network width. Depth is fixed at two down-blocks and two up-blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self::with_base(8)
    }

    pub fn paper() -> Self {
        Self::with_base(64)
    }

    pub fn with_base(base_channels: usize) -> Self {
        Self {
            base_channels,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        if self.in_channels != 1 || self.out_channels != 1 {
            return Err(Error::Config(
                "only single-channel input and output are supported".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One convolution, optionally followed by batch norm + ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    weight: usize,
    bias: usize,
    /// Segment indices of gamma, beta, running mean, running var.
    bn: Option<[usize; 4]>,
}

/// Layer table and segment layout for a [`ModelConfig`].
///
/// Widths with base `b`: encoder `b`, `2b`; bottleneck `2b → 4b → 2b`;
/// decoder `(2b+2b) → 2b → b` and `(b+b) → b → b`; 1×1 head `b → 1`.
#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
    layers: Vec<ConvLayer>,
    segments: Vec<Segment>,
}

const ENC1_A: usize = 0;
const ENC1_B: usize = 1;
const ENC2_A: usize = 2;
const ENC2_B: usize = 3;
const MID_A: usize = 4;
const MID_B: usize = 5;
const DEC2_A: usize = 6;
const DEC2_B: usize = 7;
const DEC1_A: usize = 8;
const DEC1_B: usize = 9;
const HEAD: usize = 10;

impl UNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let plan: [(&str, usize, usize, usize, bool); 11] = [
            ("enc1.conv_a", config.in_channels, b, 3, true),
            ("enc1.conv_b", b, b, 3, true),
            ("enc2.conv_a", b, 2 * b, 3, true),
            ("enc2.conv_b", 2 * b, 2 * b, 3, true),
            ("mid.conv_a", 2 * b, 4 * b, 3, true),
            ("mid.conv_b", 4 * b, 2 * b, 3, true),
            ("dec2.conv_a", 4 * b, 2 * b, 3, true),
            ("dec2.conv_b", 2 * b, b, 3, true),
            ("dec1.conv_a", 2 * b, b, 3, true),
            ("dec1.conv_b", b, b, 3, true),
            ("head", b, config.out_channels, 1, false),
        ];
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, kind: SegmentKind, segments: &mut Vec<Segment>| {
            segments.push(Segment {
                name,
                offset,
                len,
                kind,
            });
            offset += len;
            segments.len() - 1
        };
        let mut layers = Vec::with_capacity(plan.len());
        for (name, cin, cout, k, bn) in plan {
            let weight = push(
                format!("{name}.weight"),
                cout * cin * k * k,
                SegmentKind::ConvWeight,
                &mut segments,
            );
            let bias = push(format!("{name}.bias"), cout, SegmentKind::ConvBias, &mut segments);
            let bn = bn.then(|| {
                [
                    (".bn.gamma", SegmentKind::BnGamma),
                    (".bn.beta", SegmentKind::BnBeta),
                    (".bn.running_mean", SegmentKind::BnRunningMean),
                    (".bn.running_var", SegmentKind::BnRunningVar),
                ]
                .map(|(suffix, kind)| push(format!("{name}{suffix}"), cout, kind, &mut segments))
            });
            layers.push(ConvLayer {
                name: name.to_string(),
                cin,
                cout,
                ksize: k,
                weight,
                bias,
                bn,
            });
        }
        Ok(Self {
            config,
            layers,
            segments,
        })
    }

    /// Recovers the architecture from a parameter set's layout.
    pub fn for_params(params: &ParamSet) -> Result<Self> {
        let first = params
            .segments()
            .first()
            .ok_or_else(|| Error::Version("empty parameter layout".into()))?;
        let base = first.len / 9;
        let net = Self::new(ModelConfig::with_base(base))
            .map_err(|e| Error::Version(format!("unrecognised layout: {e}")))?;
        if net.segments.as_slice() != params.segments() {
            return Err(Error::Version(
                "parameter layout does not match any U-Net configuration".into(),
            ));
        }
        Ok(net)
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn param_count(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }
}

/// He-normal convolution weights (`std = sqrt(2 / fan_in)`), zero biases,
/// unit BN scale, zero BN shift, running stats `(0, 1)`. Pure in `seed`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<ParamSet> {
    let net = UNet::new(config)?;
    let mut values = vec![0.0f32; net.param_count()];
    let mut rng = substream(seed, &[label::INIT]);
    for layer in &net.layers {
        let seg = &net.segments[layer.weight];
        let fan_in = (layer.cin * layer.ksize * layer.ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        for v in &mut values[seg.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (z * std) as f32;
        }
        if let Some([gamma, _, _, var]) = layer.bn {
            values[net.segments[gamma].range()].fill(1.0);
            values[net.segments[var].range()].fill(1.0);
        }
    }
    ParamSet::new(net.segments, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Images with their ground-truth masks.
#[derive(Clone, Debug)]
pub struct SegBatch {
    pub images: Tensor,
    pub masks: Tensor,
}

impl SegBatch {
    pub fn new(images: Tensor, masks: Tensor) -> Result<Self> {
        let [n, c, h, w] = images.shape();
        if masks.shape() != [n, 1, h, w] || c != 1 {
            return Err(Error::shape(
                "seg_batch",
                format!("images {:?} vs masks {:?}", images.shape(), masks.shape()),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be divisible by 4"
            )));
        }
        Ok(Self { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter leaves created on a tape by [`forward_on_tape`].
pub struct TapeParams {
    /// `(segment index, leaf)` for every trainable segment.
    pub leaves: Vec<(usize, Var)>,
    /// Updated running statistics `(segment index, values)` in train mode.
    pub running: Vec<(usize, Vec<f32>)>,
}

fn in_layer(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(op) => Error::Numeric(format!("{layer} ({op})")),
        other => other,
    }
}

struct Builder<'a> {
    params: &'a ParamSet,
    net: &'a UNet,
    mode: Mode,
    momentum: f32,
    requires_grad: bool,
    out: TapeParams,
}

impl Builder<'_> {
    fn leaf(&mut self, tape: &mut Tape, seg_idx: usize, shape: [usize; 4]) -> Result<Var> {
        let seg = &self.net.segments[seg_idx];
        let t = Tensor::new(shape, self.params.slice(seg).to_vec())?;
        let v = tape.leaf(t, self.requires_grad);
        if self.requires_grad {
            self.out.leaves.push((seg_idx, v));
        }
        Ok(v)
    }

    fn conv(&mut self, tape: &mut Tape, idx: usize, x: Var) -> Result<Var> {
        let layer = &self.net.layers[idx];
        let (name, cin, cout, k, wi, bi, bn) = (
            layer.name.as_str(),
            layer.cin,
            layer.cout,
            layer.ksize,
            layer.weight,
            layer.bias,
            layer.bn,
        );
        let w = self.leaf(tape, wi, [cout, cin, k, k])?;
        let b = self.leaf(tape, bi, [cout, 1, 1, 1])?;
        let y = tape.conv2d(x, w, b).map_err(in_layer(name))?;
        let Some([gi, be, rm, rv]) = bn else {
            return Ok(y);
        };
        let gamma = self.leaf(tape, gi, [cout, 1, 1, 1])?;
        let beta = self.leaf(tape, be, [cout, 1, 1, 1])?;
        let mean = self.params.slice(&self.net.segments[rm]);
        let var = self.params.slice(&self.net.segments[rv]);
        let y = match self.mode {
            Mode::Eval => tape.batch_norm(
                y,
                gamma,
                beta,
                BnMode::Eval {
                    running_mean: mean,
                    running_var: var,
                },
                BN_EPS,
            ),
            Mode::Train => {
                let mut mean = mean.to_vec();
                let mut var = var.to_vec();
                let out = tape.batch_norm(
                    y,
                    gamma,
                    beta,
                    BnMode::Train {
                        running_mean: &mut mean,
                        running_var: &mut var,
                        momentum: self.momentum,
                    },
                    BN_EPS,
                );
                self.out.running.push((rm, mean));
                self.out.running.push((rv, var));
                out
            }
        }
        .map_err(in_layer(name))?;
        tape.relu(y).map_err(in_layer(name))
    }
}

/// Records the network on `tape`. Parameters become leaves (requiring grad
/// when the tape records gradients); `params` itself is never modified.
pub fn forward_on_tape(
    params: &ParamSet,
    tape: &mut Tape,
    images: Var,
    mode: Mode,
    requires_grad: bool,
) -> Result<(Var, TapeParams)> {
    record_network(params, tape, images, mode, requires_grad, BN_MOMENTUM)
}

fn record_network(
    params: &ParamSet,
    tape: &mut Tape,
    images: Var,
    mode: Mode,
    requires_grad: bool,
    momentum: f32,
) -> Result<(Var, TapeParams)> {
    let net = UNet::for_params(params)?;
    let [_, c, h, w] = tape.value(images).shape();
    if c != net.config.in_channels {
        return Err(Error::shape("forward", format!("input has {c} channels")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be divisible by 4"
        )));
    }
    let mut bld = Builder {
        params,
        net: &net,
        mode,
        momentum,
        requires_grad,
        out: TapeParams {
            leaves: Vec::new(),
            running: Vec::new(),
        },
    };
    let e1 = bld.conv(tape, ENC1_A, images)?;
    let e1 = bld.conv(tape, ENC1_B, e1)?;
    let p1 = tape.max_pool2(e1)?;
    let e2 = bld.conv(tape, ENC2_A, p1)?;
    let e2 = bld.conv(tape, ENC2_B, e2)?;
    let p2 = tape.max_pool2(e2)?;
    let m = bld.conv(tape, MID_A, p2)?;
    let m = bld.conv(tape, MID_B, m)?;
    let u2 = tape.upsample_nearest2(m)?;
    let d2 = tape.concat_channels(u2, e2)?;
    let d2 = bld.conv(tape, DEC2_A, d2)?;
    let d2 = bld.conv(tape, DEC2_B, d2)?;
    let u1 = tape.upsample_nearest2(d2)?;
    let d1 = tape.concat_channels(u1, e1)?;
    let d1 = bld.conv(tape, DEC1_A, d1)?;
    let d1 = bld.conv(tape, DEC1_B, d1)?;
    let logits = bld.conv(tape, HEAD, d1)?;
    let prob = tape.sigmoid(logits).map_err(in_layer("head"))?;
    Ok((prob, bld.out))
}

fn apply_running(params: &mut ParamSet, running: Vec<(usize, Vec<f32>)>) {
    let segs: Vec<_> = running
        .iter()
        .map(|(i, _)| params.segments()[*i].range())
        .collect();
    for (range, (_, vals)) in segs.into_iter().zip(running) {
        params.values_mut()[range].copy_from_slice(&vals);
    }
}

/// Probability map for `images`. Train mode normalizes with batch
/// statistics and folds them into the running estimates in `params`.
pub fn forward(params: &mut ParamSet, images: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let (prob, tp) = forward_on_tape(params, &mut tape, x, mode, false)?;
    if mode == Mode::Train {
        apply_running(params, tp.running);
    }
    Ok(tape.take_value(prob))
}

/// Replaces every running BN statistic with the batch statistics of
/// `images` (momentum 1), leaving trainable values untouched.
pub fn recalibrate_bn(params: &mut ParamSet, images: &Tensor) -> Result<()> {
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let (_, tp) = record_network(params, &mut tape, x, Mode::Train, false, 1.0)?;
    apply_running(params, tp.running);
    Ok(())
}

/// Eval-mode probability map. Pure in `(params, images)`.
pub fn predict(params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let (prob, _) = forward_on_tape(params, &mut tape, x, Mode::Eval, false)?;
    Ok(tape.take_value(prob))
}

/// Result of one train-mode forward/backward pass.
pub struct TrainStep {
    pub loss: f64,
    /// Gradient in the parameter layout; zero on running-stat segments.
    pub grad: Vec<f32>,
}

/// Mean BCE on `batch` and its gradient. Running BN statistics in `params`
/// are updated as a side effect of the train-mode forward.
pub fn loss_and_grad(params: &mut ParamSet, batch: &SegBatch) -> Result<TrainStep> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let (prob, tp) = forward_on_tape(params, &mut tape, x, Mode::Train, true)?;
    let loss = tape.bce_loss(prob, &batch.masks)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    let mut grads = tape.backward(loss)?;
    let mut grad = vec![0.0f32; params.len()];
    for (seg_idx, v) in &tp.leaves {
        let range = params.segments()[*seg_idx].range();
        let g = grads.take(*v).expect("leaf gradient");
        grad[range].copy_from_slice(g.data());
    }
    apply_running(params, tp.running);
    Ok(TrainStep {
        loss: loss_value,
        grad,
    })
}
