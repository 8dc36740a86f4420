//! Short-term (PR, SR) and long-term (Pr, Re, F-score) tracking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::BBox;

/// Center-error threshold in pixels for PR at 64-pixel resolution.
pub const CENTER_ERROR_PX: f64 = 5.0;
/// IoU thresholds `0, 0.05, …, 1` of the success curve.
pub const SUCCESS_STEPS: usize = 20;
/// Confidence thresholds `0, 0.02, …, 1` of the long-term sweep.
pub const CONFIDENCE_STEPS: usize = 50;

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS)
        .map(|i| i as f64 / SUCCESS_STEPS as f64)
        .collect()
}

pub fn confidence_thresholds() -> Vec<f64> {
    (0..=CONFIDENCE_STEPS)
        .map(|i| i as f64 / CONFIDENCE_STEPS as f64)
        .collect()
}

/// Harmonic mean; zero when both inputs are zero.
pub fn f_score(pr: f64, re: f64) -> f64 {
    if pr + re <= 0.0 {
        0.0
    } else {
        2.0 * pr * re / (pr + re)
    }
}

/// One evaluated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameResult {
    pub pred: BBox,
    pub truth: BBox,
    pub confidence: f64,
}

/// Fraction of frames whose IoU reaches each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect()
}

pub fn success_auc(ious: &[f64]) -> f64 {
    let c = success_curve(ious);
    c.iter().sum::<f64>() / c.len() as f64
}

pub fn precision_rate(center_errors: &[f64], threshold: f64) -> f64 {
    let n = center_errors.len().max(1) as f64;
    center_errors.iter().filter(|&&e| e <= threshold).count() as f64 / n
}

/// `(Pr(τ), Re(τ))` for every confidence threshold. Frames with confidence
/// at least `τ` count as reported; the target is present in every frame.
pub fn long_term_curves(ious: &[f64], confidences: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = ious.len().max(1) as f64;
    let mut pr = Vec::new();
    let mut re = Vec::new();
    for tau in confidence_thresholds() {
        let (mut sum, mut count) = (0.0, 0usize);
        for (&iou, &c) in ious.iter().zip(confidences) {
            if c >= tau {
                sum += iou;
                count += 1;
            }
        }
        pr.push(if count == 0 { 0.0 } else { sum / count as f64 });
        re.push(sum / n);
    }
    (pr, re)
}

/// `(F, Pr, Re, τ)` at the F-maximizing threshold; ties go to the lowest `τ`.
pub fn best_f(pr: &[f64], re: &[f64]) -> (f64, f64, f64, f64) {
    let taus = confidence_thresholds();
    let mut best = (f_score(pr[0], re[0]), pr[0], re[0], taus[0]);
    for i in 1..pr.len() {
        let f = f_score(pr[i], re[i]);
        if f > best.0 {
            best = (f, pr[i], re[i], taus[i]);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub modality: String,
    pub frames: usize,
    pub mean_iou: f64,
    pub precision_curve: Vec<f64>,
    pub recall_curve: Vec<f64>,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub best_threshold: f64,
    /// PR: fraction of frames within the center-error threshold.
    pub pr_at_threshold: f64,
    /// SR: area under the success curve.
    pub success_auc: f64,
    pub success_curve: Vec<f64>,
}

pub fn sequence_metrics(
    id: &str,
    modality: &str,
    frames: &[FrameResult],
    image_size: usize,
) -> SequenceMetrics {
    let ious: Vec<f64> = frames.iter().map(|f| f.pred.iou(&f.truth)).collect();
    let errs: Vec<f64> = frames
        .iter()
        .map(|f| f.pred.center_error(&f.truth, image_size))
        .collect();
    let conf: Vec<f64> = frames.iter().map(|f| f.confidence).collect();
    let (pc, rc) = long_term_curves(&ious, &conf);
    let (f, p, r, tau) = best_f(&pc, &rc);
    SequenceMetrics {
        id: id.to_string(),
        modality: modality.to_string(),
        frames: frames.len(),
        mean_iou: ious.iter().sum::<f64>() / ious.len().max(1) as f64,
        precision_curve: pc,
        recall_curve: rc,
        f_score: f,
        precision: p,
        recall: r,
        best_threshold: tau,
        pr_at_threshold: precision_rate(&errs, CENTER_ERROR_PX * image_size as f64 / 64.0),
        success_auc: success_auc(&ious),
        success_curve: success_curve(&ious),
    }
}

/// Sequence-averaged metrics; the long-term curves are averaged per
/// threshold before the F-score maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub mean_iou: f64,
    pub pr: f64,
    pub sr: f64,
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub success_curve: Vec<f64>,
}

pub fn aggregate(seqs: &[SequenceMetrics]) -> Aggregate {
    let n = seqs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| seqs.iter().map(f).sum::<f64>() / n;
    let avg_curve = |f: &dyn Fn(&SequenceMetrics) -> &Vec<f64>, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| seqs.iter().map(|s| f(s)[i]).sum::<f64>() / n)
            .collect()
    };
    let pc = avg_curve(&|s| &s.precision_curve, CONFIDENCE_STEPS + 1);
    let rc = avg_curve(&|s| &s.recall_curve, CONFIDENCE_STEPS + 1);
    let (f, p, r, _) = best_f(&pc, &rc);
    Aggregate {
        sequences: seqs.len(),
        mean_iou: mean(&|s| s.mean_iou),
        pr: mean(&|s| s.pr_at_threshold),
        sr: mean(&|s| s.success_auc),
        f_score: f,
        precision: p,
        recall: r,
        success_curve: avg_curve(&|s| &s.success_curve, SUCCESS_STEPS + 1),
    }
}

/// Aggregates keyed by modality tag.
pub fn per_modality(seqs: &[SequenceMetrics]) -> BTreeMap<String, Aggregate> {
    let mut groups: BTreeMap<String, Vec<SequenceMetrics>> = BTreeMap::new();
    for s in seqs {
        groups
            .entry(s.modality.clone())
            .or_default()
            .push(s.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, aggregate(&v)))
        .collect()
}
