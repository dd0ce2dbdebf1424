//! Tumor-stroma ratio scoring and evaluation statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::TissueClass;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("slide has neither tumor nor stroma patches")]
    NoTumorOrStroma,
    #[error("input is empty")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("both raters use a single category; kappa falls back to {fallback}")]
    DegenerateMarginals { fallback: f64 },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("unknown TSR category {0}")]
    UnknownCategory(u8),
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

/// Visual TSR scoring scale in percent.
pub const CATEGORIES: [u8; 9] = [10, 20, 30, 40, 50, 60, 70, 80, 90];
pub const DEFAULT_CUTOFF: f64 = 0.5;

/// Stroma share among tumor and stroma patches; *other* is ignored.
pub fn tsr(n_stroma: u64, n_tumor: u64) -> Result<f64> {
    let den = n_stroma + n_tumor;
    if den == 0 {
        return Err(ScoringError::NoTumorOrStroma);
    }
    Ok(n_stroma as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StromaCategory {
    Low,
    High,
}

impl StromaCategory {
    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::High => "high",
        }
    }
}

/// High iff `tsr > cutoff`; a ratio exactly at the cutoff is Low.
pub fn stroma_category(tsr: f64, cutoff: f64) -> StromaCategory {
    if tsr > cutoff {
        StromaCategory::High
    } else {
        StromaCategory::Low
    }
}

/// Rows are true classes, columns predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(truth: &[TissueClass], pred: &[TissueClass]) -> Result<ConfusionMatrix3> {
    if truth.len() != pred.len() {
        return Err(ScoringError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let mut cm = ConfusionMatrix3::default();
    for (t, p) in truth.iter().zip(pred) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix3) -> Result<f64> {
    match cm.total() {
        0 => Err(ScoringError::UndefinedMetric("accuracy of an empty matrix")),
        n => Ok(cm.trace() as f64 / n as f64),
    }
}

pub fn precision(cm: &ConfusionMatrix3, class: TissueClass) -> Result<f64> {
    let c = class.index();
    match cm.col_sum(c) {
        0 => Err(ScoringError::UndefinedMetric("precision: class never predicted")),
        d => Ok(cm.counts[c][c] as f64 / d as f64),
    }
}

pub fn recall(cm: &ConfusionMatrix3, class: TissueClass) -> Result<f64> {
    let c = class.index();
    match cm.row_sum(c) {
        0 => Err(ScoringError::UndefinedMetric("recall: class absent from truth")),
        d => Ok(cm.counts[c][c] as f64 / d as f64),
    }
}

pub fn f1(cm: &ConfusionMatrix3, class: TissueClass) -> Result<f64> {
    let p = precision(cm, class)?;
    let r = recall(cm, class)?;
    if p + r == 0.0 {
        return Err(ScoringError::UndefinedMetric("f1: precision and recall are both zero"));
    }
    Ok(2.0 * p * r / (p + r))
}

/// Per-class metrics; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix3,
}

pub fn classification_report(cm: &ConfusionMatrix3) -> Result<ClassificationReport> {
    Ok(ClassificationReport {
        accuracy: accuracy(cm)?,
        per_class: TissueClass::ALL
            .iter()
            .map(|&c| ClassMetrics {
                class: c.name().to_string(),
                precision: precision(cm, c).ok(),
                recall: recall(cm, c).ok(),
                f1: f1(cm, c).ok(),
                support: cm.row_sum(c.index()),
            })
            .collect(),
        confusion: *cm,
    })
}

/// Cohen's kappa between two equal-length label sequences.
///
/// When both raters put everything in one and the same category the chance
/// agreement is 1 and kappa is undefined; the error then carries the
/// conventional fallback value.
pub fn cohen_kappa<T: Eq + Copy>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScoringError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let n = a.len() as f64;
    let mut cats: Vec<T> = Vec::new();
    for &x in a.iter().chain(b) {
        if !cats.contains(&x) {
            cats.push(x);
        }
    }
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let p_o = agree / n;
    if cats.len() == 1 {
        return Err(ScoringError::DegenerateMarginals {
            fallback: if p_o == 1.0 { 1.0 } else { 0.0 },
        });
    }
    let p_e: f64 = cats
        .iter()
        .map(|c| {
            let pa = a.iter().filter(|x| *x == c).count() as f64 / n;
            let pb = b.iter().filter(|x| *x == c).count() as f64 / n;
            pa * pb
        })
        .sum();
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Kappa with the degenerate case resolved to its fallback.
pub fn cohen_kappa_or_fallback<T: Eq + Copy>(a: &[T], b: &[T]) -> Result<f64> {
    match cohen_kappa(a, b) {
        Err(ScoringError::DegenerateMarginals { fallback }) => Ok(fallback),
        other => other,
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ScoringError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(ScoringError::EmptyInput);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ScoringError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Divisor used for the standard error of the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeeDivisor {
    /// Root-mean-square error.
    #[default]
    N,
    /// Regression-style `n - 2`.
    NMinus2,
}

/// Divisor used for standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdDivisor {
    #[default]
    Population,
    Sample,
}

fn see_with(pred: &[f64], truth: &[f64], divisor: SeeDivisor) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(ScoringError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let d = match divisor {
        SeeDivisor::N => pred.len() as f64,
        SeeDivisor::NMinus2 if pred.len() > 2 => (pred.len() - 2) as f64,
        SeeDivisor::NMinus2 => return Err(ScoringError::UndefinedMetric("SEE with n - 2 needs n > 2")),
    };
    Ok((ss / d).sqrt())
}

/// Standard error of the estimate as RMSE: `sqrt(sum((p - t)^2) / n)`.
pub fn see(pred: &[f64], truth: &[f64]) -> Result<f64> {
    see_with(pred, truth, SeeDivisor::N)
}

pub fn see_n_minus_2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    see_with(pred, truth, SeeDivisor::NMinus2)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsOptions {
    pub see_divisor: SeeDivisor,
    pub std_divisor: StdDivisor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileRow {
    pub category: u8,
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub see: Option<f64>,
    pub std: Option<f64>,
}

/// Predicted-TSR statistics per true category, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileSummary {
    pub rows: Vec<DecileRow>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn std_dev(x: &[f64], divisor: StdDivisor) -> Option<f64> {
    let d = match divisor {
        StdDivisor::Population => x.len() as f64,
        StdDivisor::Sample if x.len() > 1 => (x.len() - 1) as f64,
        StdDivisor::Sample => return None,
    };
    let m = mean(x);
    Some((x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d).sqrt())
}

/// `scores` pairs a true category (10..=90) with a predicted TSR in percent.
/// Per-category SEE is measured against the category value itself.
pub fn decile_summary(scores: &[(u8, f64)], opts: StatsOptions) -> Result<DecileSummary> {
    let mut groups: BTreeMap<u8, Vec<f64>> = CATEGORIES.iter().map(|&c| (c, Vec::new())).collect();
    for &(cat, pred) in scores {
        groups
            .get_mut(&cat)
            .ok_or(ScoringError::UnknownCategory(cat))?
            .push(pred);
    }
    let rows = groups
        .into_iter()
        .map(|(category, mut preds)| {
            if preds.is_empty() {
                return DecileRow {
                    category,
                    n: 0,
                    mean: None,
                    median: None,
                    see: None,
                    std: None,
                };
            }
            preds.sort_by(|a, b| a.total_cmp(b));
            let truth = vec![category as f64; preds.len()];
            DecileRow {
                category,
                n: preds.len(),
                mean: Some(mean(&preds)),
                median: Some(median(&preds)),
                see: see_with(&preds, &truth, opts.see_divisor).ok(),
                std: std_dev(&preds, opts.std_divisor),
            }
        })
        .collect();
    Ok(DecileSummary { rows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub n_tumor: u64,
    pub n_stroma: u64,
    pub n_other: u64,
}

impl SlideScore {
    /// `None` marks an unscorable slide (no tumor or stroma patches).
    pub fn tsr(&self) -> Option<f64> {
        tsr(self.n_stroma, self.n_tumor).ok()
    }

    pub fn is_scorable(&self) -> bool {
        self.n_stroma + self.n_tumor > 0
    }

    pub fn category(&self, cutoff: f64) -> Option<StromaCategory> {
        self.tsr().map(|t| stroma_category(t, cutoff))
    }
}

/// Counts patch labels for one slide.
pub fn score_slide(slide_id: &str, labels: &[TissueClass]) -> Result<SlideScore> {
    if labels.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let mut counts = [0u64; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    let [n_tumor, n_stroma, n_other] = counts;
    Ok(SlideScore {
        slide_id: slide_id.to_string(),
        n_tumor,
        n_stroma,
        n_other,
    })
}

/// Slide-level agreement between predicted TSR and visual scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideEvaluation {
    pub n_slides: usize,
    pub n_unscorable: usize,
    /// Scorable slides that have a true score.
    pub n_evaluated: usize,
    pub pearson_r: Option<f64>,
    /// RMSE in percentage points.
    pub see: Option<f64>,
    pub see_n_minus_2: Option<f64>,
    pub cohen_kappa: Option<f64>,
    pub kappa_degenerate: bool,
    pub cutoff: f64,
    /// `[[low->low, low->high], [high->low, high->high]]`, rows true.
    pub category_confusion: [[usize; 2]; 2],
    pub deciles: DecileSummary,
}

pub fn evaluate_slides(
    scores: &[SlideScore],
    truth: &BTreeMap<String, u8>,
    cutoff: f64,
    opts: StatsOptions,
) -> Result<SlideEvaluation> {
    let mut pred = Vec::new();
    let mut actual = Vec::new();
    for s in scores {
        if let (Some(t), Some(&cat)) = (s.tsr(), truth.get(&s.slide_id)) {
            pred.push(t * 100.0);
            actual.push(cat);
        }
    }
    let actual_f: Vec<f64> = actual.iter().map(|&c| c as f64).collect();
    let pc: Vec<StromaCategory> = pred.iter().map(|p| stroma_category(p / 100.0, cutoff)).collect();
    let tc: Vec<StromaCategory> = actual_f.iter().map(|t| stroma_category(t / 100.0, cutoff)).collect();
    let mut category_confusion = [[0usize; 2]; 2];
    let idx = |c: StromaCategory| usize::from(c == StromaCategory::High);
    for (t, p) in tc.iter().zip(&pc) {
        category_confusion[idx(*t)][idx(*p)] += 1;
    }
    let (cohen, degenerate) = match cohen_kappa(&tc, &pc) {
        Ok(k) => (Some(k), false),
        Err(ScoringError::DegenerateMarginals { fallback }) => (Some(fallback), true),
        Err(_) => (None, false),
    };
    let pairs: Vec<(u8, f64)> = actual.iter().copied().zip(pred.iter().copied()).collect();
    Ok(SlideEvaluation {
        n_slides: scores.len(),
        n_unscorable: scores.iter().filter(|s| !s.is_scorable()).count(),
        n_evaluated: pred.len(),
        pearson_r: pearson_r(&pred, &actual_f).ok(),
        see: see(&pred, &actual_f).ok(),
        see_n_minus_2: see_n_minus_2(&pred, &actual_f).ok(),
        cohen_kappa: cohen,
        kappa_degenerate: degenerate,
        cutoff,
        category_confusion,
        deciles: decile_summary(&pairs, opts)?,
    })
}
