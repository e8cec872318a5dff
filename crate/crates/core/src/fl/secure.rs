//! Simulated secure aggregation with exactly-canceling pairwise masks.
//!
//! Each client encodes its (already weighted) delta in two's-complement
//! fixed point at scale 2²⁴, then adds a pseudo-random mask per peer: the
//! lower-indexed client of a pair adds the shared stream, the higher one
//! subtracts it. All arithmetic wraps mod 2⁶⁴, so the masks cancel exactly
//! in the server's sum and the server only ever handles masked vectors.

use rand::{RngCore, SeedableRng};

use super::aggregate::RoundUpdate;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, label, Rng};

pub const FIXED_SCALE: f64 = (1u64 << 24) as f64;
/// Magnitudes at or above `2³⁹ / 2²⁴` are rejected so that the sum of
/// many clients stays far from the `i64` boundary.
pub const FIXED_LIMIT: f64 = 32768.0;

pub fn encode_fixed(v: f32) -> Result<u64> {
    let x = v as f64;
    if !x.is_finite() || x.abs() >= FIXED_LIMIT {
        return Err(Error::Range(format!(
            "{v} is outside the fixed-point range (|v| < {FIXED_LIMIT})"
        )));
    }
    Ok((x * FIXED_SCALE).round() as i64 as u64)
}

pub fn decode_fixed(v: u64) -> f64 {
    v as i64 as f64 / FIXED_SCALE
}

/// Symmetric matrix of pair seeds, one per unordered client pair.
#[derive(Clone, Debug)]
pub struct PairwiseSeeds {
    n: usize,
    seeds: Vec<u64>,
}

impl PairwiseSeeds {
    /// Fresh pair seeds for `round`. Stands in for a key agreement.
    pub fn derive(seed: u64, round: usize, n_clients: usize) -> Self {
        let mut seeds = vec![0; n_clients * n_clients];
        for i in 0..n_clients {
            for j in i + 1..n_clients {
                let s = derive_seed(seed, &[label::SECURE_AGG, round as u64, i as u64, j as u64]);
                seeds[i * n_clients + j] = s;
                seeds[j * n_clients + i] = s;
            }
        }
        Self { n: n_clients, seeds }
    }

    pub fn n_clients(&self) -> usize {
        self.n
    }

    pub fn pair(&self, i: usize, j: usize) -> u64 {
        self.seeds[i * self.n + j]
    }
}

/// What a client puts on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub client_id: usize,
    pub masked_fixed: Vec<u64>,
    pub n_samples: usize,
}

/// Plain fixed-point encoding of a delta (no masks).
pub fn encode_vector(delta: &[f32]) -> Result<Vec<u64>> {
    delta.iter().map(|&v| encode_fixed(v)).collect()
}

/// Client side: encode `update.delta` and add the pair masks of slot
/// `index` among `seeds.n_clients()` participants.
pub fn mask_update(update: &RoundUpdate, index: usize, seeds: &PairwiseSeeds) -> Result<MaskedUpdate> {
    let mut out = encode_vector(&update.delta)?;
    for peer in (0..seeds.n_clients()).filter(|&p| p != index) {
        let mut stream = Rng::seed_from_u64(seeds.pair(index, peer));
        let add = index < peer;
        for v in out.iter_mut() {
            let m = stream.next_u64();
            *v = if add { v.wrapping_add(m) } else { v.wrapping_sub(m) };
        }
    }
    Ok(MaskedUpdate {
        client_id: update.client_id,
        masked_fixed: out,
        n_samples: update.n_samples,
    })
}

/// Server side: wrapping sum of masked vectors, still in fixed point.
pub fn sum_masked(masked: &[MaskedUpdate]) -> Result<Vec<u64>> {
    let len = masked
        .first()
        .ok_or_else(|| Error::Protocol("no masked updates".into()))?
        .masked_fixed
        .len();
    let mut acc = vec![0u64; len];
    for m in masked {
        if m.masked_fixed.len() != len {
            return Err(Error::Protocol(format!(
                "client {} sent {} values, expected {len}",
                m.client_id,
                m.masked_fixed.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&m.masked_fixed) {
            *a = a.wrapping_add(v);
        }
    }
    Ok(acc)
}

/// Sum of the clients' deltas through the masking protocol. Clients sit in
/// slots by ascending `client_id`; the caller pre-weights deltas if it
/// wants a weighted mean.
pub fn secure_aggregate(updates: &[RoundUpdate], seeds: &PairwiseSeeds) -> Result<Vec<f32>> {
    if updates.len() < 2 {
        return Err(Error::Protocol(
            "secure aggregation needs at least two clients".into(),
        ));
    }
    if seeds.n_clients() != updates.len() {
        return Err(Error::Protocol(format!(
            "{} pair seeds for {} clients",
            seeds.n_clients(),
            updates.len()
        )));
    }
    let mut ordered: Vec<&RoundUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let masked = ordered
        .iter()
        .enumerate()
        .map(|(slot, u)| mask_update(u, slot, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_masked(&masked)?
        .into_iter()
        .map(|v| decode_fixed(v) as f32)
        .collect())
}
