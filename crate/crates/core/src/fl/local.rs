use std::ops::Range;

use rand::seq::SliceRandom;

use super::aggregate::{aggregated_segments, RoundUpdate};
use super::config::{Method, TrainConfig};
use crate::data::{to_batch, SliceSample};
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ParamSet, SegmentKind};
use crate::rng::Rng;

/// SGD with heavy-ball momentum, L2 weight decay and an optional proximal
/// pull towards an anchor model. Running BN statistics are never stepped.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub prox_mu: f32,
    velocity: Vec<f32>,
    trainable: Vec<Range<usize>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f32, momentum: f32, weight_decay: f32, prox_mu: f32) -> Self {
        let trainable = params
            .segments()
            .iter()
            .filter(|s| s.kind.is_trainable())
            .map(|s| s.range())
            .collect();
        Self {
            lr,
            momentum,
            weight_decay,
            prox_mu,
            velocity: vec![0.0; params.len()],
            trainable,
        }
    }

    /// `g ← ∇L + λw + μ(w − w_anchor)`, `v ← m·v + g`, `w ← w − lr·v`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &[f32], anchor: Option<&ParamSet>) {
        let w = params.values_mut();
        for range in &self.trainable {
            for i in range.clone() {
                let mut g = grad[i] + self.weight_decay * w[i];
                if let Some(a) = anchor {
                    if self.prox_mu != 0.0 {
                        g += self.prox_mu * (w[i] - a.values()[i]);
                    }
                }
                let v = self.momentum * self.velocity[i] + g;
                self.velocity[i] = v;
                w[i] -= self.lr * v;
            }
        }
    }
}

/// Where a training loop runs, for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct TrainSite {
    pub round: usize,
    pub client: usize,
}

/// Mini-batch epochs over `data` in an `rng`-shuffled order. Returns the
/// number of optimizer steps taken.
#[allow(clippy::too_many_arguments)]
pub fn sgd_epochs(
    params: &mut ParamSet,
    opt: &mut Sgd,
    anchor: Option<&ParamSet>,
    data: &[&SliceSample],
    batch_size: usize,
    epochs: usize,
    rng: &mut Rng,
    max_steps: Option<usize>,
    site: TrainSite,
) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::Usage(format!(
            "client {} has no training data",
            site.client
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            if max_steps.is_some_and(|m| steps >= m) {
                return Ok(steps);
            }
            let refs: Vec<&SliceSample> = chunk.iter().map(|&i| data[i]).collect();
            let batch = to_batch(&refs)?;
            let step = loss_and_grad(params, &batch).map_err(|e| match e {
                Error::Numeric(what) => Error::Numeric(format!(
                    "{what} at round {}, client {}, batch {batch_idx}",
                    site.round, site.client
                )),
                e => e,
            })?;
            if !step.loss.is_finite() {
                return Err(Error::NanLoss {
                    round: site.round,
                    client: site.client,
                    batch: batch_idx,
                });
            }
            opt.step(params, &step.grad, anchor);
            steps += 1;
        }
    }
    Ok(steps)
}

pub struct LocalResult {
    pub update: RoundUpdate,
    /// The client's own BN segments after training (FedBN only).
    pub local_bn: Option<Vec<f32>>,
}

/// One round of client training starting from the broadcast `global`
/// model. Under FedBN the client's persisted BN segments replace the
/// broadcast ones first. The momentum buffer starts from zero each round.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    global: &ParamSet,
    local_bn: Option<&[f32]>,
    data: &[SliceSample],
    cfg: &TrainConfig,
    method: Method,
    round: usize,
    client_id: usize,
    rng: &mut Rng,
) -> Result<LocalResult> {
    let mut params = global.clone();
    if let Some(bn) = local_bn {
        params.scatter(SegmentKind::is_bn, bn)?;
        if cfg.bn_reset {
            for s in params.segments().to_vec() {
                let fill = match s.kind {
                    SegmentKind::BnRunningMean => 0.0,
                    SegmentKind::BnRunningVar => 1.0,
                    _ => continue,
                };
                params.values_mut()[s.range()].fill(fill);
            }
        }
    }
    let mut opt = Sgd::new(
        &params,
        cfg.lr_at(round),
        cfg.momentum,
        cfg.weight_decay,
        cfg.mu_for(method),
    );
    let refs: Vec<&SliceSample> = data.iter().collect();
    sgd_epochs(
        &mut params,
        &mut opt,
        Some(global),
        &refs,
        cfg.batch_size,
        cfg.local_epochs,
        rng,
        cfg.max_local_steps,
        TrainSite {
            round,
            client: client_id,
        },
    )?;
    let filter = aggregated_segments(method);
    let after = params.gather(filter);
    let before = global.gather(filter);
    let delta = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let local_bn = (method == Method::FedBn).then(|| params.gather(SegmentKind::is_bn));
    Ok(LocalResult {
        update: RoundUpdate {
            client_id,
            delta,
            n_samples: data.len(),
        },
        local_bn,
    })
}
