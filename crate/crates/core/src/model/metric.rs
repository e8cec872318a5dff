use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// `1` where `prob >= threshold`, else `0`.
pub fn binarize(prob: &[f32], threshold: f32) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Dice similarity `2|A∩B| / (|A| + |B|)` of two binary masks.
///
/// Two empty masks score 1.0: predicting "no tumor" correctly is a match.
pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "dice on masks of {} and {} pixels",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p != 0, t != 0);
        a += p as u64;
        b += t as u64;
        inter += (p && t) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}
