//! Test-set evaluation, per-round histories, multi-seed aggregation and
//! the on-disk artifacts (CSV histories, TOML summaries, SVG curves).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{to_batch, SliceSample};
use crate::error::{Error, Result};
use crate::fl::Method;
use crate::model::{binarize, dice, Segmenter, DEFAULT_THRESHOLD};
use crate::tensor::bce_mean;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub dice: f64,
    pub ce_loss: f64,
    pub mia_auc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentHistory {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// Post-clip update norms, one per client per DP round.
    pub dp_clip_norms: Vec<f64>,
    /// Final Dice of each isolated client model (local-only runs).
    pub per_client_final_dice: Vec<f64>,
    /// Accountant output for DP runs.
    pub epsilon: Option<f64>,
    /// Attack-model weights (standardized features, then bias).
    pub attack_weights: Option<Vec<f64>>,
    /// Why the run stopped before its last round (model divergence).
    pub failure: Option<String>,
}

impl ExperimentHistory {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            records: Vec::new(),
            dp_clip_norms: Vec::new(),
            per_client_final_dice: Vec::new(),
            epsilon: None,
            attack_weights: None,
            failure: None,
        }
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn final_dice(&self) -> Option<f64> {
        self.last().map(|r| r.dice)
    }

    pub fn final_ce(&self) -> Option<f64> {
        self.last().map(|r| r.ce_loss)
    }

    /// AUC of the last round that tracked it.
    pub fn final_auc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.mia_auc)
    }

    pub fn dice_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dice).collect()
    }

    pub fn auc_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.mia_auc.map(|a| (r.round, a)))
            .collect()
    }

    /// Running maximum of the Dice series.
    pub fn best_so_far_dice(&self) -> Vec<f64> {
        self.records
            .iter()
            .scan(f64::NEG_INFINITY, |best, r| {
                *best = best.max(r.dice);
                Some(*best)
            })
            .collect()
    }
}

/// Mean per-image Dice (threshold 0.5) and mean per-image BCE of `model`
/// on `test`.
pub fn evaluate(model: &dyn Segmenter, test: &[SliceSample]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Usage("evaluation needs a non-empty test set".into()));
    }
    let mut dice_sum = 0.0;
    let mut ce_sum = 0.0;
    for chunk in test.chunks(EVAL_CHUNK) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let batch = to_batch(&refs)?;
        let prob = model.predict(&batch.images)?;
        let pixels = chunk[0].height * chunk[0].width;
        for (i, s) in chunk.iter().enumerate() {
            let p = &prob.data()[i * pixels..(i + 1) * pixels];
            let m = &batch.masks.data()[i * pixels..(i + 1) * pixels];
            dice_sum += dice(&binarize(p, DEFAULT_THRESHOLD), &s.mask)?;
            ce_sum += bce_mean(p, m);
        }
    }
    let n = test.len() as f64;
    Ok((dice_sum / n, ce_sum / n))
}

/// Mean and sample standard deviation (n − 1 denominator, 0 for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Shifted by the first value so identical inputs give exactly that
    // value back and a zero spread.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedAggregate {
    pub method: Method,
    /// Seeds that completed every round; the statistics cover only these.
    pub n_seeds: usize,
    /// Seeds whose run diverged before the last round.
    pub n_diverged: usize,
    /// NaN when no seed completed.
    pub dice_mean: f64,
    pub dice_std: f64,
    pub ce_mean: f64,
    pub ce_std: f64,
    /// Present when every seed tracked the attack.
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Per-metric mean ± std over the final records of same-method histories.
/// Diverged runs are counted but excluded from the statistics, since
/// their last record is not a final-round result.
pub fn aggregate_seeds(histories: &[ExperimentHistory]) -> Result<SeedAggregate> {
    let first = histories
        .first()
        .ok_or_else(|| Error::Usage("no histories to aggregate".into()))?;
    if histories.iter().any(|h| h.method != first.method) {
        return Err(Error::Usage("histories mix methods".into()));
    }
    let completed: Vec<&ExperimentHistory> = histories.iter().filter(|h| h.failure.is_none()).collect();
    let finals = |f: fn(&ExperimentHistory) -> Option<f64>| -> Result<Vec<f64>> {
        completed
            .iter()
            .map(|h| {
                f(h).ok_or_else(|| Error::Usage(format!("history for seed {} is empty", h.seed)))
            })
            .collect()
    };
    let (dice_mean, dice_std) = mean_std(&finals(ExperimentHistory::final_dice)?);
    let (ce_mean, ce_std) = mean_std(&finals(ExperimentHistory::final_ce)?);
    let (auc_mean, auc_std) = match finals(ExperimentHistory::final_auc) {
        Ok(a) if !a.is_empty() => {
            let (m, s) = mean_std(&a);
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    Ok(SeedAggregate {
        method: first.method,
        n_seeds: completed.len(),
        n_diverged: histories.len() - completed.len(),
        dice_mean,
        dice_std,
        ce_mean,
        ce_std,
        auc_mean,
        auc_std,
        epsilon: first.epsilon,
    })
}

pub const CSV_HEADER: &str = "round,dice,ce_loss,mia_auc,wall_ms";

pub fn history_csv(history: &ExperimentHistory) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let mut out = format!("{CSV_HEADER}\n");
    for r in &history.records {
        w.serialize(r).map_err(|e| Error::Usage(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    Ok(out)
}

pub fn write_history_csv(history: &ExperimentHistory, path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)?).map_err(|e| Error::io(path, e))
}

pub fn parse_history_csv(text: &str) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::Data(format!("history CSV: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Data(format!("history CSV header must be `{CSV_HEADER}`")));
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Data(format!("history CSV: {e}"))))
        .collect()
}

pub fn read_history_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history_csv(&text)
}

#[derive(Serialize)]
struct Summary<'a, C: Serialize> {
    config: &'a C,
    result: SummaryResult,
}

#[derive(Serialize)]
struct SummaryResult {
    method: Method,
    seed: u64,
    rounds: usize,
    final_dice: Option<f64>,
    final_ce_loss: Option<f64>,
    final_mia_auc: Option<f64>,
    epsilon: Option<f64>,
    max_post_clip_norm: Option<f64>,
    per_client_final_dice: Vec<f64>,
    mia_auc_series: Vec<f64>,
    attack_weights: Option<Vec<f64>>,
    failure: Option<String>,
}

/// TOML text echoing `config` in full followed by the run's results.
pub fn summary_text(config: &impl Serialize, history: &ExperimentHistory) -> Result<String> {
    let summary = Summary {
        config,
        result: SummaryResult {
            method: history.method,
            seed: history.seed,
            rounds: history.records.len(),
            final_dice: history.final_dice(),
            final_ce_loss: history.final_ce(),
            final_mia_auc: history.final_auc(),
            epsilon: history.epsilon,
            max_post_clip_norm: history.dp_clip_norms.iter().copied().reduce(f64::max),
            per_client_final_dice: history.per_client_final_dice.clone(),
            mia_auc_series: history.auc_series().into_iter().map(|(_, a)| a).collect(),
            attack_weights: history.attack_weights.clone(),
            failure: history.failure.clone(),
        },
    };
    toml::to_string(&summary).map_err(|e| Error::Config(format!("summary encoding: {e}")))
}

pub fn write_summary(config: &impl Serialize, history: &ExperimentHistory, path: &Path) -> Result<()> {
    std::fs::write(path, summary_text(config, history)?).map_err(|e| Error::io(path, e))
}

/// One named line of a chart.
#[derive(Clone, Debug)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Self-contained SVG line chart with one polyline per curve.
pub fn curves_svg(curves: &[Curve], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pts = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 1.0f64);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            top + ph + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = c
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_curves_svg(curves: &[Curve], title: &str, x_label: &str, y_label: &str, path: &Path) -> Result<()> {
    std::fs::write(path, curves_svg(curves, title, x_label, y_label)).map_err(|e| Error::io(path, e))
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plain-text table with the columns Mean Dice ↑ / CE Loss ↓ / MI Risk AUC ↓,
/// one row per aggregate in the given order.
pub fn results_table(rows: &[SeedAggregate]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>18} {:>18} {:>18} {:>10}",
        "Method", "Seeds", "Mean Dice ↑", "CE Loss ↓", "MI Risk AUC ↓", "epsilon"
    );
    for r in rows {
        let auc = match (r.auc_mean, r.auc_std) {
            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
            _ => "-".into(),
        };
        let eps = r.epsilon.map_or("-".into(), |e| format!("{e:.2}"));
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>18} {:>18} {:>18} {:>10}",
            r.method.name(),
            r.n_seeds,
            pm(r.dice_mean, r.dice_std, 3),
            pm(r.ce_mean, r.ce_std, 4),
            auc,
            eps
        );
    }
    for r in rows.iter().filter(|r| r.n_diverged > 0) {
        let _ = writeln!(
            s,
            "note: {} diverged on {} of {} seeds; those runs are excluded above",
            r.method.name(),
            r.n_diverged,
            r.n_seeds + r.n_diverged
        );
    }
    s
}

fn pm(mean: f64, std: f64, digits: usize) -> String {
    if mean.is_nan() {
        "-".into()
    } else {
        format!("{mean:.digits$} ± {std:.digits$}")
    }
}
