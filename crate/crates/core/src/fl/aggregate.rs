use super::config::Method;
use crate::error::{Error, Result};
use crate::model::{ParamSet, SegmentKind};

/// A client's contribution to one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundUpdate {
    pub client_id: usize,
    /// `w_local − w_global` over the aggregated segments, in layout order.
    pub delta: Vec<f32>,
    pub n_samples: usize,
}

/// Segments the server averages under `method`: everything, except that
/// FedBN keeps all batch-norm segments on the clients.
pub fn aggregated_segments(method: Method) -> fn(SegmentKind) -> bool {
    fn all(_: SegmentKind) -> bool {
        true
    }
    fn non_bn(k: SegmentKind) -> bool {
        !k.is_bn()
    }
    if method == Method::FedBn {
        non_bn
    } else {
        all
    }
}

/// `w_global + delta` on the aggregated segments.
pub fn apply_delta(global: &ParamSet, delta: &[f32], method: Method) -> Result<ParamSet> {
    let filter = aggregated_segments(method);
    let base = global.gather(filter);
    if base.len() != delta.len() {
        return Err(Error::Protocol(format!(
            "aggregate delta has {} values, layout expects {}",
            delta.len(),
            base.len()
        )));
    }
    let updated: Vec<f32> = base.iter().zip(delta).map(|(w, d)| w + d).collect();
    let mut out = global.clone();
    out.scatter(filter, &updated)?;
    Ok(out)
}

/// Sample-weighted mean of the client deltas applied to `global`:
/// `w + Σ_k (n_k / Σn) · Δ_k`, summed in `f64` in client-id order.
pub fn aggregate(updates: &[RoundUpdate], global: &ParamSet, method: Method) -> Result<ParamSet> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("aggregate needs at least one update".into()))?;
    let len = first.delta.len();
    if let Some(bad) = updates.iter().find(|u| u.delta.len() != len) {
        return Err(Error::Protocol(format!(
            "client {} sent {} values, expected {len}",
            bad.client_id,
            bad.delta.len()
        )));
    }
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::Protocol("updates carry zero samples".into()));
    }
    let mut ordered: Vec<&RoundUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut acc = vec![0.0f64; len];
    for u in ordered {
        let w = u.n_samples as f64 / total as f64;
        for (a, &d) in acc.iter_mut().zip(&u.delta) {
            *a += w * d as f64;
        }
    }
    let filter = aggregated_segments(method);
    let base = global.gather(filter);
    if base.len() != len {
        return Err(Error::Protocol(format!(
            "updates have {len} values, layout expects {}",
            base.len()
        )));
    }
    let updated: Vec<f32> = base
        .iter()
        .zip(&acc)
        .map(|(&w, &d)| (w as f64 + d) as f32)
        .collect();
    let mut out = global.clone();
    out.scatter(filter, &updated)?;
    Ok(out)
}
