//! Template-initialized tracking over sequences and metric reports.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{predict_bbox, BBox, UnTrack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::ModalSequence;

use super::metrics::{
    aggregate, per_modality, sequence_metrics, Aggregate, FrameResult, SequenceMetrics,
};
use super::train::PreparedSequence;

/// Produces `(box, confidence)` for frames `1..len` given frame 0's box.
pub trait Predictor: Sync {
    fn name(&self) -> &str;

    fn track(&self, seq: &ModalSequence, dummy: bool) -> Result<Vec<(BBox, f64)>>;
}

/// Reports the ground truth with full confidence.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn track(&self, seq: &ModalSequence, _dummy: bool) -> Result<Vec<(BBox, f64)>> {
        Ok(seq.samples.iter().skip(1).map(|s| (s.truth, 1.0)).collect())
    }
}

/// Repeats the initial box.
pub struct StaticPredictor;

impl Predictor for StaticPredictor {
    fn name(&self) -> &str {
        "static"
    }

    fn track(&self, seq: &ModalSequence, _dummy: bool) -> Result<Vec<(BBox, f64)>> {
        let first = seq
            .samples
            .first()
            .ok_or_else(|| Error::Size("empty sequence".into()))?
            .truth;
        Ok(seq.samples.iter().skip(1).map(|_| (first, 1.0)).collect())
    }
}

/// Runs the tracker with the full frame as search region and a template
/// cut around the initial box.
pub struct ModelPredictor<'a, S> {
    pub model: &'a UnTrack<S>,
}

impl<S: Scalar> Predictor for ModelPredictor<'_, S> {
    fn name(&self) -> &str {
        "model"
    }

    fn track(&self, seq: &ModalSequence, dummy: bool) -> Result<Vec<(BBox, f64)>> {
        let cfg = &self.model.config;
        if let Some(s) = seq.samples.first() {
            if s.rgb.dims() != [3, cfg.image_size, cfg.image_size] {
                return Err(Error::Config(format!(
                    "sequence frames {:?} do not match model image size {}",
                    s.rgb.dims(),
                    cfg.image_size
                )));
            }
        }
        let p = PreparedSequence::<S>::new(seq, cfg.template_size, dummy)?;
        let mut out = Vec::with_capacity(p.len().saturating_sub(1));
        for t in 1..p.len() {
            let tape = Tape::new();
            let o = self
                .model
                .forward(&tape, &p.template, &p.rgb[t], Some(p.aux_input(t)))?;
            out.push(predict_bbox(&o.scores.value(), &o.boxes.value())?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamp {
    pub unix_seconds: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub config_hash: String,
    pub seed: u64,
    pub dummy_mode: bool,
    pub aggregate: Aggregate,
    pub per_modality: BTreeMap<String, Aggregate>,
    pub sequences: Vec<SequenceMetrics>,
    /// Excluded from determinism comparisons.
    pub timestamp: Option<Timestamp>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without the timestamp field.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.timestamp = None;
        r.to_json()
    }
}

/// Run metadata stamped onto a report.
#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
}

pub fn evaluate(
    predictor: &dyn Predictor,
    seqs: &[ModalSequence],
    dummy: bool,
    meta: &RunMeta,
) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    let per_seq: Vec<SequenceMetrics> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let preds = predictor.track(seq, dummy)?;
            let frames: Vec<FrameResult> = preds
                .into_iter()
                .zip(seq.samples.iter().skip(1))
                .map(|((pred, confidence), s)| FrameResult {
                    pred,
                    truth: s.truth,
                    confidence,
                })
                .collect();
            let tag = seq.config.modality.to_string();
            Ok(sequence_metrics(
                &format!("seq_{i:04}"),
                &tag,
                &frames,
                seq.config.image_size,
            ))
        })
        .collect::<Result<_>>()?;
    let unix_seconds = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(MetricsReport {
        predictor: predictor.name().to_string(),
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        dummy_mode: dummy,
        aggregate: aggregate(&per_seq),
        per_modality: per_modality(&per_seq),
        sequences: per_seq,
        timestamp: Some(Timestamp {
            unix_seconds,
            wall_seconds: start.elapsed().as_secs_f64(),
        }),
    })
}

pub fn evaluate_model<S: Scalar>(
    model: &UnTrack<S>,
    seqs: &[ModalSequence],
    dummy: bool,
    meta: &RunMeta,
) -> Result<MetricsReport> {
    evaluate(&ModelPredictor { model }, seqs, dummy, meta)
}
