//! Black-box membership inference: shadow training, per-image attack
//! features, a logistic-regression attack and Mann–Whitney AUC.
//!
//! Everything here talks to models through [`Segmenter`] only, i.e. it
//! sees eval-mode probability maps and nothing else.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{to_batch, ClientData, Federation, SliceSample};
use crate::error::{Error, Result};
use crate::fl::{sgd_epochs, Sgd, TrainConfig, TrainSite};
use crate::metrics::EVAL_CHUNK;
use crate::model::{binarize, build_model, dice, ModelConfig, ParamSet, Segmenter, DEFAULT_THRESHOLD};
use crate::rng::{derive_seed, label, substream};
use crate::tensor::PROB_CLAMP;

pub const N_FEATURES: usize = 4;
/// Full-batch gradient-descent settings of the attack classifier.
pub const ATTACK_LR: f64 = 0.1;
pub const ATTACK_ITERATIONS: usize = 500;
/// Smallest class size the attack is trained on.
pub const MIN_CLASS: usize = 20;

/// Summary statistics of one predicted probability map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttackFeatures {
    /// Mean pixel BCE against the ground-truth mask.
    pub loss: f64,
    /// Mean binary entropy of the prediction, in `[0, ln 2]`.
    pub entropy: f64,
    /// Mean `max(p, 1 − p)`, in `[0.5, 1]`.
    pub max_confidence: f64,
    pub dice: f64,
}

impl AttackFeatures {
    pub fn from_prediction(prob: &[f32], mask: &[u8]) -> Result<Self> {
        if prob.len() != mask.len() || prob.is_empty() {
            return Err(Error::Usage("prediction and mask sizes differ".into()));
        }
        let lo = PROB_CLAMP as f64;
        let (mut loss, mut entropy, mut conf) = (0.0, 0.0, 0.0);
        for (&p, &m) in prob.iter().zip(mask) {
            let p = p as f64;
            let pc = p.clamp(lo, 1.0 - lo);
            loss -= if m != 0 { pc.ln() } else { (1.0 - pc).ln() };
            entropy += binary_entropy(p);
            conf += p.max(1.0 - p);
        }
        let n = prob.len() as f64;
        Ok(Self {
            loss: loss / n,
            entropy: entropy / n,
            max_confidence: conf / n,
            dice: dice(&binarize(prob, DEFAULT_THRESHOLD), mask)?,
        })
    }

    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [self.loss, self.entropy, self.max_confidence, self.dice]
    }
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// Attack features of every sample, in input order.
pub fn extract_features(model: &dyn Segmenter, samples: &[&SliceSample]) -> Result<Vec<AttackFeatures>> {
    let chunks: Vec<Vec<AttackFeatures>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = to_batch(chunk)?;
            let prob = model.predict(&batch.images)?;
            let pixels = chunk[0].height * chunk[0].width;
            chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    AttackFeatures::from_prediction(&prob.data()[i * pixels..(i + 1) * pixels], &s.mask)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Standardize-then-logistic-regression membership classifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackModel {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    pub weights: [f64; N_FEATURES],
    pub bias: f64,
    /// Features with zero variance on the shadow data; weight pinned to 0.
    pub frozen: [bool; N_FEATURES],
    pub shadow_seed: u64,
    pub iterations: usize,
}

impl AttackModel {
    fn standardize(&self, f: &AttackFeatures) -> [f64; N_FEATURES] {
        let mut x = f.to_array();
        for j in 0..N_FEATURES {
            x[j] = if self.frozen[j] { 0.0 } else { (x[j] - self.mean[j]) / self.std[j] };
        }
        x
    }

    /// Membership score in `(0, 1)`; larger means "member".
    pub fn score(&self, f: &AttackFeatures) -> f64 {
        let x = self.standardize(f);
        sigmoid(self.bias + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>())
    }

    /// Weights followed by the bias.
    pub fn coefficients(&self) -> Vec<f64> {
        self.weights.iter().copied().chain([self.bias]).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fits the attack on labelled shadow features (members = 1).
pub fn fit_attack(members: &[AttackFeatures], nonmembers: &[AttackFeatures], shadow_seed: u64) -> Result<AttackModel> {
    if members.len() < MIN_CLASS || nonmembers.len() < MIN_CLASS {
        return Err(Error::Usage(format!(
            "attack training needs at least {MIN_CLASS} samples per class, got {} and {}",
            members.len(),
            nonmembers.len()
        )));
    }
    let rows: Vec<([f64; N_FEATURES], f64)> = members
        .iter()
        .map(|f| (f.to_array(), 1.0))
        .chain(nonmembers.iter().map(|f| (f.to_array(), 0.0)))
        .collect();
    let n = rows.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    let mut std = [0.0; N_FEATURES];
    let mut frozen = [false; N_FEATURES];
    for j in 0..N_FEATURES {
        mean[j] = rows.iter().map(|r| r.0[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = var.sqrt();
        frozen[j] = !(std[j] > 1e-12 * mean[j].abs().max(1.0));
        if frozen[j] {
            std[j] = 1.0;
        }
    }
    let mut model = AttackModel {
        mean,
        std,
        weights: [0.0; N_FEATURES],
        bias: 0.0,
        frozen,
        shadow_seed,
        iterations: ATTACK_ITERATIONS,
    };
    let xs: Vec<([f64; N_FEATURES], f64)> = rows
        .iter()
        .map(|(x, y)| {
            let mut z = *x;
            for j in 0..N_FEATURES {
                z[j] = if frozen[j] { 0.0 } else { (z[j] - mean[j]) / std[j] };
            }
            (z, *y)
        })
        .collect();
    for _ in 0..ATTACK_ITERATIONS {
        let mut gw = [0.0; N_FEATURES];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let z = model.bias + x.iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>();
            let r = sigmoid(z) - y;
            gb += r;
            for j in 0..N_FEATURES {
                gw[j] += r * x[j];
            }
        }
        model.bias -= ATTACK_LR * gb / n;
        for j in 0..N_FEATURES {
            if !frozen[j] {
                model.weights[j] -= ATTACK_LR * gw[j] / n;
            }
        }
    }
    Ok(model)
}

/// Extracts shadow-model features and fits the attack on them.
pub fn train_attack(
    shadow_model: &dyn Segmenter,
    shadow_members: &[SliceSample],
    shadow_nonmembers: &[SliceSample],
    shadow_seed: u64,
) -> Result<AttackModel> {
    let m = extract_features(shadow_model, &shadow_members.iter().collect::<Vec<_>>())?;
    let nm = extract_features(shadow_model, &shadow_nonmembers.iter().collect::<Vec<_>>())?;
    fit_attack(&m, &nm, shadow_seed)
}

/// Probability that a random member outscores a random non-member, ties
/// counting one half (Mann–Whitney U / (n_m·n_n)).
pub fn auc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::Usage("AUC needs at least one member and one non-member".into()));
    }
    let mut u = 0.0;
    for &m in member_scores {
        for &n in nonmember_scores {
            u += if m > n {
                1.0
            } else if m == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(u / (member_scores.len() * nonmember_scores.len()) as f64)
}

pub fn attack_auc(
    attack: &AttackModel,
    target: &dyn Segmenter,
    members: &[&SliceSample],
    nonmembers: &[&SliceSample],
) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Usage("AUC needs at least one member and one non-member".into()));
    }
    let score = |set: &[&SliceSample]| -> Result<Vec<f64>> {
        Ok(extract_features(target, set)?.iter().map(|f| attack.score(f)).collect())
    };
    auc(&score(members)?, &score(nonmembers)?)
}

/// Trains the shadow U-Net centralized-style on the shadow-member half for
/// `rounds · local_epochs` epochs with the target's optimizer settings.
pub fn train_shadow(
    federation: &Federation,
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamSet> {
    let (members, _) = federation.shadow_split();
    let members: Vec<&SliceSample> = members.iter().collect();
    let mut params = build_model(model, derive_seed(seed, &[label::SHADOW]))?;
    let mut rng = substream(seed, &[label::SHADOW, 1]);
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay, 0.0);
    for round in 0..cfg.rounds {
        opt.lr = cfg.lr_at(round);
        sgd_epochs(
            &mut params,
            &mut opt,
            None,
            &members,
            cfg.batch_size,
            cfg.local_epochs,
            &mut rng,
            cfg.max_local_steps,
            TrainSite { round, client: usize::MAX },
        )?;
    }
    Ok(params)
}

/// Shadow model plus attack classifier for one seed.
pub fn prepare_attack(
    federation: &Federation,
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AttackModel> {
    let shadow = train_shadow(federation, model, cfg, seed)?;
    let (members, nonmembers) = federation.shadow_split();
    train_attack(&shadow, members, nonmembers, seed)
}

/// Outcome of attacking one stored model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub seed: u64,
    pub auc: f64,
    pub members: usize,
    pub nonmembers: usize,
    pub attack: AttackModel,
}

/// Full pipeline against a stored model: shadow training, attack fitting,
/// and AUC on a member/non-member panel of `panel` samples per class.
pub fn attack_model(
    target: &ParamSet,
    federation: &Federation,
    model: ModelConfig,
    cfg: &TrainConfig,
    panel: usize,
    seed: u64,
) -> Result<AttackReport> {
    if !build_model(model, 0)?.same_layout(target) {
        return Err(Error::Version(format!(
            "checkpoint layout does not match a U-Net with base_channels = {}",
            model.base_channels
        )));
    }
    let attack = prepare_attack(federation, model, cfg, seed)?;
    let tracker = MiaTracker::new(attack, &federation.clients, panel, seed, 1);
    Ok(AttackReport {
        seed,
        auc: tracker.auc(target)?,
        members: tracker.members.len(),
        nonmembers: tracker.nonmembers.len(),
        attack: tracker.attack,
    })
}

/// Splits `total` over `weights` by largest remainder (ties to lower index).
fn quotas(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut q: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (total * w % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - q.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        q[i] += 1;
    }
    q
}

fn pick(pool: &[SliceSample], n: usize, seed: u64, path: &[u64]) -> Vec<SliceSample> {
    let n = n.min(pool.len());
    let mut idx = sample(&mut substream(seed, path), pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Per-round attack evaluation against a fixed member/non-member panel.
#[derive(Clone, Debug)]
pub struct MiaTracker {
    pub attack: AttackModel,
    /// Drawn from the clients' training sets.
    pub members: Vec<SliceSample>,
    /// Drawn from the clients' held-out validation sets.
    pub nonmembers: Vec<SliceSample>,
    /// Evaluate every `cadence` rounds (and always on the last).
    pub cadence: usize,
}

impl MiaTracker {
    /// Panel of `n` members spread over clients in proportion to their
    /// training sizes, and as many non-members from the same clients'
    /// validation sets.
    pub fn new(attack: AttackModel, clients: &[ClientData], n: usize, seed: u64, cadence: usize) -> Self {
        let q = quotas(n, &clients.iter().map(|c| c.train.len()).collect::<Vec<_>>());
        let mut members = Vec::new();
        let mut nonmembers = Vec::new();
        for (k, (c, &qk)) in clients.iter().zip(&q).enumerate() {
            members.extend(pick(&c.train, qk, seed, &[label::MIA_SAMPLE, k as u64, 0]));
            nonmembers.extend(pick(&c.val, qk, seed, &[label::MIA_SAMPLE, k as u64, 1]));
        }
        Self {
            attack,
            members,
            nonmembers,
            cadence: cadence.max(1),
        }
    }

    /// Panel restricted to one client (isolated baselines).
    pub fn for_client(&self, client: &ClientData, index: usize, n: usize, seed: u64) -> Self {
        let n = n.min(client.train.len()).min(client.val.len());
        Self {
            attack: self.attack.clone(),
            members: pick(&client.train, n, seed, &[label::MIA_SAMPLE, index as u64, 0]),
            nonmembers: pick(&client.val, n, seed, &[label::MIA_SAMPLE, index as u64, 1]),
            cadence: self.cadence,
        }
    }

    pub fn due(&self, round: usize, rounds: usize) -> bool {
        round % self.cadence == 0 || round == rounds
    }

    pub fn auc(&self, target: &dyn Segmenter) -> Result<f64> {
        let m: Vec<&SliceSample> = self.members.iter().collect();
        let n: Vec<&SliceSample> = self.nonmembers.iter().collect();
        attack_auc(&self.attack, target, &m, &n)
    }
}
