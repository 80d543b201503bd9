//! Thresholding precomputed toxicity scores and scoring the classifier.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::recommender::csv_err;

/// Candidate thresholds used when none are configured.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.1, 0.2, 0.3, 0.35];

/// How far below the best true-positive rate a threshold may fall and still
/// be considered.
pub const TPR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
    pub label: Option<bool>,
}

impl ScoredItem {
    pub fn new(id: impl Into<String>, score: f64, label: Option<bool>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            score,
            label,
        })
    }
}

/// Toxic when the score is strictly above the threshold.
pub fn binarize(score: f64, threshold: f64) -> bool {
    score > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion counts and scores over the labeled items. Precision is 0 when
/// nothing is predicted toxic, recall 0 when nothing is toxic, and F1 is 0
/// when both are 0.
pub fn evaluate(items: &[ScoredItem], threshold: f64) -> Result<ThresholdReport> {
    let mut c = ConfusionMatrix::default();
    let mut labeled = 0;
    for item in items {
        let Some(truth) = item.label else { continue };
        labeled += 1;
        match (binarize(item.score, threshold), truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if labeled == 0 {
        return Err(Error::InsufficientData("no labeled items to evaluate".into()));
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(c.tp, c.tp + c.fp);
    let recall = div(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ThresholdReport {
        threshold,
        confusion: c,
        precision,
        recall,
        f1,
    })
}

/// Among the candidates whose true-positive rate is within tolerance of the
/// best, pick the highest F1; ties go to the lower threshold. Returns the
/// chosen report and the full sweep in ascending threshold order.
pub fn select_threshold(items: &[ScoredItem], candidates: &[f64]) -> Result<(ThresholdReport, Vec<ThresholdReport>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidParams("no candidate thresholds".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sweep = sorted.iter().map(|&t| evaluate(items, t)).collect::<Result<Vec<_>>>()?;
    let best_tpr = sweep.iter().map(|r| r.recall).fold(f64::NEG_INFINITY, f64::max);
    let mut chosen: Option<&ThresholdReport> = None;
    for r in sweep.iter().filter(|r| r.recall >= best_tpr - TPR_TOLERANCE) {
        if chosen.is_none_or(|c| r.f1 > c.f1) {
            chosen = Some(r);
        }
    }
    Ok((*chosen.expect("at least one candidate"), sweep))
}

/// Read `item_id,score,label` rows; the label column may be empty or absent
/// and accepts `1/0/true/false`.
pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<ScoredItem>> {
    let mut input = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = input.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if !(cols == ["item_id", "score"] || cols == ["item_id", "score", "label"]) {
        return Err(Error::DataContract("scores header must be `item_id,score[,label]`".into()));
    }
    let mut items = Vec::new();
    for (line, rec) in input.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = line + 2;
        let score = rec
            .get(1)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::DataContract(format!("row {row}: bad score")))?;
        let label = match rec.get(2).map(str::trim) {
            None | Some("") => None,
            Some("1") | Some("true") => Some(true),
            Some("0") | Some("false") => Some(false),
            Some(other) => return Err(Error::DataContract(format!("row {row}: bad label `{other}`"))),
        };
        let item = ScoredItem::new(rec.get(0).unwrap_or_default(), score, label)
            .map_err(|e| Error::DataContract(format!("row {row}: {e}")))?;
        items.push(item);
    }
    Ok(items)
}

pub const REPORT_HEADER: [&str; 8] = ["threshold", "tp", "fp", "tn", "fn", "precision", "recall", "f1"];

pub fn write_report_csv<W: Write>(w: W, sweep: &[ThresholdReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in sweep {
        let c = r.confusion;
        out.write_record([
            r.threshold.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
