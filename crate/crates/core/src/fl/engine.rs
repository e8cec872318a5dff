use std::time::Instant;

use rayon::prelude::*;

use super::aggregate::{aggregate, apply_delta, RoundUpdate};
use super::config::{Method, TrainConfig};
use super::local::{local_train, sgd_epochs, LocalResult, Sgd, TrainSite};
use super::secure::{secure_aggregate, PairwiseSeeds};
use crate::data::{to_batch, Federation, SliceSample};
use crate::dp::{account_privacy, privatize, DpConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ExperimentHistory, RoundRecord};
use crate::mia::MiaTracker;
use crate::model::{build_model, recalibrate_bn, ModelConfig, ParamSet, SegmentKind};
use crate::rng::{label, substream};

/// Everything a single (method, seed) run needs.
#[derive(Clone, Copy)]
pub struct RunInputs<'a> {
    pub federation: &'a Federation,
    pub model: ModelConfig,
    pub train: &'a TrainConfig,
    pub dp: &'a DpConfig,
    pub seed: u64,
    /// Attack panel evaluated against every round's model, if tracking.
    pub mia: Option<&'a MiaTracker>,
}

pub struct RunOutput {
    pub history: ExperimentHistory,
    /// Final global model (client-0 model for local-only runs).
    pub model: ParamSet,
    /// Per-client histories of local-only runs.
    pub client_histories: Vec<ExperimentHistory>,
}

pub fn run_method(method: Method, inputs: RunInputs<'_>) -> Result<RunOutput> {
    inputs.train.validate()?;
    inputs.dp.validate()?;
    match method {
        Method::Centralized => train_centralized(inputs),
        Method::LocalOnly => train_local_only(inputs),
        _ => run_federated(method, inputs),
    }
}

/// Ends a run early when round `round` (0-based) diverged, recording why;
/// any other error propagates.
fn stop_on_divergence(history: &mut ExperimentHistory, round: usize, e: Error) -> Result<()> {
    if !e.is_divergence() {
        return Err(e);
    }
    log::warn!(
        "{} seed {} diverged in round {}: {e}",
        history.method,
        history.seed,
        round + 1
    );
    history.failure = Some(format!("round {}: {e}", round + 1));
    Ok(())
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn record(
    model: &ParamSet,
    inputs: &RunInputs<'_>,
    mia: Option<&MiaTracker>,
    round: usize,
    started: Instant,
) -> Result<RoundRecord> {
    let (dice, ce_loss) = evaluate(model, &inputs.federation.test)?;
    let mia_auc = match mia {
        Some(t) if t.due(round, inputs.train.rounds) => Some(t.auc(model)?),
        _ => None,
    };
    Ok(RoundRecord {
        round,
        dice,
        ce_loss,
        mia_auc,
        wall_ms: elapsed_ms(started),
    })
}

/// Server-side evaluation model for FedBN: aggregated non-BN weights,
/// sample-weighted mean of the clients' affine BN parameters, and running
/// statistics re-estimated on the first two batches of the test set.
fn fedbn_eval_model(
    global: &ParamSet,
    client_bn: &[Option<Vec<f32>>],
    weights: &[f64],
    test: &[SliceSample],
    batch_size: usize,
) -> Result<ParamSet> {
    let mut model = global.clone();
    let len = model.count(SegmentKind::is_bn);
    let mut acc = vec![0.0f64; len];
    for (bn, &w) in client_bn.iter().zip(weights) {
        let bn = bn.as_ref().ok_or_else(|| Error::Protocol("missing client BN state".into()))?;
        for (a, &v) in acc.iter_mut().zip(bn) {
            *a += w * v as f64;
        }
    }
    let mean: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
    model.scatter(SegmentKind::is_bn, &mean)?;
    let n = (2 * batch_size).min(test.len());
    if n >= 2 {
        let refs: Vec<&SliceSample> = test[..n].iter().collect();
        recalibrate_bn(&mut model, &to_batch(&refs)?.images)?;
    }
    Ok(model)
}

/// `R` rounds of broadcast → parallel local training → (DP) → secure
/// aggregation → evaluation. Every client participates in every round.
pub fn run_federated(method: Method, inputs: RunInputs<'_>) -> Result<RunOutput> {
    if !method.is_federated() {
        return Err(Error::Usage(format!("{method} is not a federated method")));
    }
    let fed = inputs.federation;
    let cfg = inputs.train;
    let n_clients = fed.clients.len();
    if n_clients == 0 {
        return Err(Error::Usage("federation has no clients".into()));
    }
    let total: usize = fed.clients.iter().map(|c| c.train.len()).sum();
    let weights: Vec<f64> = fed
        .clients
        .iter()
        .map(|c| c.train.len() as f64 / total as f64)
        .collect();
    let mut global = build_model(inputs.model, inputs.seed)?;
    let mut client_bn: Vec<Option<Vec<f32>>> = vec![None; n_clients];
    let mut history = ExperimentHistory::new(method, inputs.seed);
    if method == Method::FedAvgDp {
        history.epsilon = Some(account_privacy(
            inputs.dp.noise_sigma as f64,
            cfg.rounds,
            inputs.dp.delta,
        ));
    }
    history.attack_weights = inputs.mia.map(|t| t.attack.coefficients());

    let mut run_round = |round: usize| -> Result<(RoundRecord, Vec<f64>)> {
        let started = Instant::now();
        let results: Vec<LocalResult> = fed
            .clients
            .par_iter()
            .enumerate()
            .map(|(k, client)| {
                let mut rng = substream(inputs.seed, &[label::SHUFFLE, round as u64, k as u64]);
                local_train(
                    &global,
                    client_bn[k].as_deref(),
                    &client.train,
                    cfg,
                    method,
                    round,
                    k,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let mut updates = Vec::with_capacity(n_clients);
        let mut norms = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            if r.local_bn.is_some() {
                client_bn[k] = r.local_bn;
            }
            let mut u = r.update;
            if method == Method::FedAvgDp {
                let mut rng = substream(inputs.seed, &[label::DP_NOISE, round as u64, k as u64]);
                let (noised, norm) = privatize(&u.delta, inputs.dp, &mut rng);
                if norm > inputs.dp.clip_norm as f64 * (1.0 + 1e-6) {
                    return Err(Error::Protocol(format!(
                        "clipping left norm {norm} > {} (round {round}, client {k})",
                        inputs.dp.clip_norm
                    )));
                }
                norms.push(norm);
                u.delta = noised;
            }
            updates.push(u);
        }
        global = if cfg.secure_agg && n_clients >= 2 {
            let weighted: Vec<RoundUpdate> = updates
                .iter()
                .zip(&weights)
                .map(|(u, &w)| RoundUpdate {
                    client_id: u.client_id,
                    delta: u.delta.iter().map(|&d| (d as f64 * w) as f32).collect(),
                    n_samples: u.n_samples,
                })
                .collect();
            let seeds = PairwiseSeeds::derive(inputs.seed, round, n_clients);
            let sum = secure_aggregate(&weighted, &seeds)?;
            apply_delta(&global, &sum, method)?
        } else {
            aggregate(&updates, &global, method)?
        };
        let eval_model = if method == Method::FedBn {
            fedbn_eval_model(&global, &client_bn, &weights, &fed.test, cfg.batch_size)?
        } else {
            global.clone()
        };
        Ok((record(&eval_model, &inputs, inputs.mia, round + 1, started)?, norms))
    };
    for round in 0..cfg.rounds {
        match run_round(round) {
            Ok((rec, norms)) => {
                log::info!(
                    "{method} seed {} round {}: dice {:.4} ce {:.4} auc {:?}",
                    inputs.seed,
                    rec.round,
                    rec.dice,
                    rec.ce_loss,
                    rec.mia_auc
                );
                history.records.push(rec);
                history.dp_clip_norms.extend(norms);
            }
            Err(e) => {
                stop_on_divergence(&mut history, round, e)?;
                break;
            }
        }
    }
    Ok(RunOutput {
        history,
        model: global,
        client_histories: Vec::new(),
    })
}

/// Continuous SGD on `data` with `epochs_per_round` epochs per evaluation
/// round; the momentum buffer persists across the whole run.
fn train_isolated(
    inputs: &RunInputs<'_>,
    method: Method,
    data: &[&SliceSample],
    epochs_per_round: usize,
    stream: u64,
    mia: Option<&MiaTracker>,
) -> Result<(ExperimentHistory, ParamSet)> {
    let cfg = inputs.train;
    let mut params = build_model(inputs.model, inputs.seed)?;
    let mut rng = substream(inputs.seed, &[label::ISOLATED, stream]);
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay, 0.0);
    let mut history = ExperimentHistory::new(method, inputs.seed);
    history.attack_weights = mia.map(|t| t.attack.coefficients());
    for round in 0..cfg.rounds {
        let started = Instant::now();
        opt.lr = cfg.lr_at(round);
        let rec = sgd_epochs(
            &mut params,
            &mut opt,
            None,
            data,
            cfg.batch_size,
            epochs_per_round,
            &mut rng,
            cfg.max_local_steps,
            TrainSite {
                round,
                client: stream as usize,
            },
        )
        .and_then(|_| record(&params, inputs, mia, round + 1, started));
        match rec {
            Ok(rec) => history.records.push(rec),
            Err(e) => {
                stop_on_divergence(&mut history, round, e)?;
                break;
            }
        }
    }
    Ok((history, params))
}

/// One model on the pooled training data; `n_clients · E` epochs per
/// round so the total matches `R` federated rounds over all clients.
pub fn train_centralized(inputs: RunInputs<'_>) -> Result<RunOutput> {
    let fed = inputs.federation;
    let pooled = fed.pooled_train();
    let epochs = fed.clients.len() * inputs.train.local_epochs;
    let (history, model) = train_isolated(&inputs, Method::Centralized, &pooled, epochs, 0, inputs.mia)?;
    Ok(RunOutput {
        history,
        model,
        client_histories: Vec::new(),
    })
}

/// Independent per-client models for `R · E` epochs each. The returned
/// history holds per-round means across clients.
pub fn train_local_only(inputs: RunInputs<'_>) -> Result<RunOutput> {
    let fed = inputs.federation;
    if fed.clients.is_empty() {
        return Err(Error::Usage("federation has no clients".into()));
    }
    let runs: Vec<(ExperimentHistory, ParamSet)> = fed
        .clients
        .par_iter()
        .enumerate()
        .map(|(k, client)| {
            let tracker = inputs
                .mia
                .map(|t| t.for_client(client, k, t.members.len(), inputs.seed));
            let data: Vec<&SliceSample> = client.train.iter().collect();
            train_isolated(
                &inputs,
                Method::LocalOnly,
                &data,
                inputs.train.local_epochs,
                k as u64,
                tracker.as_ref(),
            )
        })
        .collect::<Result<_>>()?;
    let n = runs.len() as f64;
    let mut history = ExperimentHistory::new(Method::LocalOnly, inputs.seed);
    history.attack_weights = inputs.mia.map(|t| t.attack.coefficients());
    // A diverged client truncates the mean history at its last good round.
    let rounds = runs.iter().map(|(h, _)| h.records.len()).min().unwrap_or(0);
    history.failure = runs
        .iter()
        .enumerate()
        .find_map(|(k, (h, _))| h.failure.as_ref().map(|f| format!("client {k}, {f}")));
    for round in 0..rounds {
        let recs: Vec<&RoundRecord> = runs.iter().map(|(h, _)| &h.records[round]).collect();
        let auc = recs
            .iter()
            .map(|r| r.mia_auc)
            .collect::<Option<Vec<f64>>>()
            .map(|a| a.iter().sum::<f64>() / n);
        history.records.push(RoundRecord {
            round: round + 1,
            dice: recs.iter().map(|r| r.dice).sum::<f64>() / n,
            ce_loss: recs.iter().map(|r| r.ce_loss).sum::<f64>() / n,
            mia_auc: auc,
            wall_ms: recs.iter().map(|r| r.wall_ms).sum(),
        });
    }
    history.per_client_final_dice = runs.iter().filter_map(|(h, _)| h.final_dice()).collect();
    let mut runs = runs.into_iter();
    let (first_history, model) = runs.next().expect("at least one client");
    let client_histories = std::iter::once(first_history)
        .chain(runs.map(|(h, _)| h))
        .collect();
    Ok(RunOutput {
        history,
        model,
        client_histories,
    })
}
