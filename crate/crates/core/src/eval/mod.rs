//! Detection matching, precision-recall curves, average precision,
//! per-condition breakdowns and latency benchmarking.

mod files;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::{in_ignore_region, Annotation, Condition, DataError, Sample};
use crate::geom::{iou, score_order, Detection};
use crate::model::{DetectOptions, Model, ModelError};

pub use files::{read_detections, read_pr_curve, write_detections, write_pr_curve};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("detections reference image {0:?}, which is not in the dataset")]
    UnknownId(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Minimum IoU for a detection to match a ground truth.
    pub iou_threshold: f64,
    /// Final score threshold used when a model is run for evaluation; lower
    /// than the deployment threshold so the PR curve covers the full range.
    pub eval_score_threshold: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub warmup_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            eval_score_threshold: 0.05,
            train_fraction: 2.0 / 3.0,
            split_seed: 11,
            warmup_runs: 3,
        }
    }
}

/// Outcome for a single detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Unmatched and centered in an ignore region: counts as neither.
    Excluded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// One label per input detection, in input order.
    pub labels: Vec<MatchLabel>,
    /// Index into the ground-truth list for true positives.
    pub matched: Vec<Option<usize>>,
    /// Non-ignored ground truths.
    pub total_gts: usize,
    /// Non-ignored ground truths left unmatched (false negatives).
    pub unmatched_gts: usize,
}

/// Greedy matching in descending score order (ties: lower detection
/// index). Each detection takes its best-IoU unmatched vehicle (ties: lower
/// ground-truth index); at or above `iou_threshold` it is a true positive.
/// Otherwise it is excluded when its center lies in an ignore region and a
/// false positive if not.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    let mut matched = vec![None; dets.len()];
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.ignore || taken[j] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= iou_threshold => {
                taken[j] = true;
                labels[i] = MatchLabel::TruePositive;
                matched[i] = Some(j);
            }
            _ if in_ignore_region(gts, d.bbox.cx, d.bbox.cy) => labels[i] = MatchLabel::Excluded,
            _ => {}
        }
    }
    let total_gts = gts.iter().filter(|g| !g.ignore).count();
    let unmatched_gts = total_gts - matched.iter().flatten().count();
    MatchResult { labels, matched, total_gts, unmatched_gts }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<PrPoint>,
    /// Set when there were no ground truths, so recall is reported as 0.
    pub recall_undefined: bool,
}

/// Sweeps a threshold over every distinct score of `(score, is_tp)` pairs.
/// Excluded detections must already be removed.
pub fn precision_recall_curve(labeled: &[(f64, bool)], total_gts: usize) -> PrCurve {
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in sorted.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_some_and(|n| n.0 == score) {
            continue;
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if total_gts == 0 { 0.0 } else { tp as f64 / total_gts as f64 };
        points.push(PrPoint { threshold: score, precision, recall });
    }
    PrCurve { points, recall_undefined: total_gts == 0 }
}

/// All-point interpolated AP: area under the monotone precision envelope.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// Detections per image id.
pub type DetectionSet = BTreeMap<String, Vec<Detection>>;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub overall_ap: f64,
    /// Conditions without images are absent.
    pub per_condition: BTreeMap<Condition, f64>,
    pub pr_curve: PrCurve,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub excluded: usize,
}

struct Tally {
    labeled: Vec<(f64, bool)>,
    gts: usize,
    fn_: usize,
    excluded: usize,
}

fn tally<'a>(samples: impl Iterator<Item = &'a Sample>, dets: &DetectionSet, iou_threshold: f64) -> Tally {
    let mut t = Tally { labeled: Vec::new(), gts: 0, fn_: 0, excluded: 0 };
    for s in samples {
        let d = dets.get(&s.id).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_detections(d, &s.annotations, iou_threshold);
        t.gts += m.total_gts;
        t.fn_ += m.unmatched_gts;
        for (det, label) in d.iter().zip(&m.labels) {
            match label {
                MatchLabel::TruePositive => t.labeled.push((det.score, true)),
                MatchLabel::FalsePositive => t.labeled.push((det.score, false)),
                MatchLabel::Excluded => t.excluded += 1,
            }
        }
    }
    t
}

/// Overall and per-condition AP. Every detection id must belong to `samples`.
pub fn evaluate(samples: &[Sample], dets: &DetectionSet, iou_threshold: f64) -> Result<EvalResult, EvalError> {
    if let Some(id) = dets.keys().find(|id| !samples.iter().any(|s| &s.id == *id)) {
        return Err(EvalError::UnknownId(id.clone()));
    }
    let all = tally(samples.iter(), dets, iou_threshold);
    let pr_curve = precision_recall_curve(&all.labeled, all.gts);
    let mut per_condition = BTreeMap::new();
    for c in Condition::ALL {
        if samples.iter().any(|s| s.condition == c) {
            let t = tally(samples.iter().filter(|s| s.condition == c), dets, iou_threshold);
            per_condition.insert(c, average_precision(&precision_recall_curve(&t.labeled, t.gts).points));
        }
    }
    let true_positives = all.labeled.iter().filter(|l| l.1).count();
    Ok(EvalResult {
        overall_ap: average_precision(&pr_curve.points),
        per_condition,
        true_positives,
        false_positives: all.labeled.len() - true_positives,
        false_negatives: all.fn_,
        excluded: all.excluded,
        pr_curve,
    })
}

/// Runs the detector over every sample.
pub fn detect_all(model: &Model, samples: &[Sample], opts: &DetectOptions) -> Result<DetectionSet, ModelError> {
    samples
        .iter()
        .map(|s| Ok((s.id.clone(), model.detect(&s.image, opts)?)))
        .collect()
}

/// Ground truth rendered as score-1 detections (an evaluator sanity check).
pub fn ground_truth_detections(samples: &[Sample]) -> DetectionSet {
    samples
        .iter()
        .map(|s| (s.id.clone(), s.vehicles().map(|a| Detection::new(a.bbox, 1.0)).collect()))
        .collect()
}

/// Per-image detect latency summary in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub dcn_mean_ms: f64,
    pub pn_mean_ms: f64,
    pub ftn_mean_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `repetitions` passes over `samples` after `warmup` untimed calls.
pub fn bench(model: &Model, samples: &[Sample], repetitions: usize, warmup: usize, opts: &DetectOptions) -> Result<LatencyStats, ModelError> {
    assert!(repetitions >= 1, "repetitions must be at least 1");
    assert!(!samples.is_empty(), "bench needs at least one image");
    for s in samples.iter().cycle().take(warmup) {
        model.detect(&s.image, opts)?;
    }
    let mut totals = Vec::with_capacity(repetitions * samples.len());
    let mut stages = [0.0f64; 3];
    for _ in 0..repetitions {
        for s in samples {
            let start = Instant::now();
            let (_, st) = model.detect_timed(&s.image, opts)?;
            totals.push(ms(start.elapsed()));
            stages[0] += ms(st.dcn);
            stages[1] += ms(st.pn);
            stages[2] += ms(st.ftn);
        }
    }
    let n = totals.len() as f64;
    let mean_ms = totals.iter().sum::<f64>() / n;
    totals.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        count: totals.len(),
        mean_ms,
        p50_ms: percentile(&totals, 0.5),
        p95_ms: percentile(&totals, 0.95),
        dcn_mean_ms: stages[0] / n,
        pn_mean_ms: stages[1] / n,
        ftn_mean_ms: stages[2] / n,
    })
}
