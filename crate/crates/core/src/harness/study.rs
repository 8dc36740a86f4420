//! Fusion-benefit protocol: one RGB backbone, several fine-tuned uni-models,
//! each scored with and without its auxiliary stream on low-contrast scenes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::TrackerConfig;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::synth::{generate_all, mixed_configs, ModalSequence, SceneConfig};

use super::eval::{evaluate_model, RunMeta};
use super::train::{probe_loss, train, TrainConfig};
use super::{config_hash, finetune_model, pretrain_backbone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStudy {
    pub tracker: TrackerConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// RGB-only scenes at normal contrast used for the backbone.
    pub pretrain_sequences: usize,
    /// Mixed training set: this many normal and this many corner-case scenes.
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seeds: Vec<u64>,
}

impl Default for FusionStudy {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            pretrain: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 800,
                ..TrainConfig::default()
            },
            pretrain_sequences: 24,
            train_sequences: 18,
            test_sequences: 9,
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub fused_iou: f64,
    pub dummy_iou: f64,
    pub margin: f64,
    /// Held-out loss before and after fine-tuning.
    pub probe_before: f64,
    pub probe_after: f64,
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub study_hash: String,
    pub pretrain_curve: Vec<f64>,
    pub seeds: Vec<SeedOutcome>,
    pub wall_seconds: f64,
}

impl FusionOutcome {
    pub fn mean_margin(&self) -> f64 {
        self.seeds.iter().map(|s| s.margin).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

/// The three datasets of the study: RGB pretraining, mixed training, and
/// corner-case evaluation. Seed ranges are disjoint.
pub fn study_data(
    study: &FusionStudy,
) -> Result<(Vec<ModalSequence>, Vec<ModalSequence>, Vec<ModalSequence>)> {
    let size = study.tracker.image_size;
    let resize = |mut v: Vec<SceneConfig>| {
        v.iter_mut().for_each(|c| c.image_size = size);
        v
    };
    let rgb = resize(
        (0..study.pretrain_sequences as u64)
            .map(|i| SceneConfig::new(Modality::Absent, 1000 + i))
            .collect(),
    );
    let mut mixed = mixed_configs(study.train_sequences, 2000, true);
    mixed.extend(mixed_configs(study.train_sequences, 3000, false));
    let test = mixed_configs(study.test_sequences, 5000, true);
    Ok((
        generate_all(&rgb)?,
        generate_all(&resize(mixed))?,
        generate_all(&resize(test))?,
    ))
}

pub fn run_fusion_study(study: &FusionStudy) -> Result<FusionOutcome> {
    if study.seeds.is_empty() || study.test_sequences == 0 {
        return Err(Error::Config(
            "fusion study needs seeds and test sequences".into(),
        ));
    }
    let start = Instant::now();
    let (rgb, mixed, test) = study_data(study)?;
    let (backbone, pre) = pretrain_backbone::<f64>(&study.tracker, &rgb, &study.pretrain)?;
    let meta = RunMeta {
        config_hash: config_hash(study),
        seed: 0,
    };
    let mut seeds = Vec::with_capacity(study.seeds.len());
    for &seed in &study.seeds {
        let cfg = TrainConfig {
            seed,
            ..study.finetune.clone()
        };
        let mut model = finetune_model(&study.tracker, Some(&backbone), seed)?;
        let probe_before = probe_loss(&mut model, &test, &cfg, 4)?;
        let report = train(&mut model, &mixed, &cfg)?;
        let probe_after = probe_loss(&mut model, &test, &cfg, 4)?;
        let meta = RunMeta {
            seed,
            ..meta.clone()
        };
        let fused = evaluate_model(&model, &test, false, &meta)?
            .aggregate
            .mean_iou;
        let dummy = evaluate_model(&model, &test, true, &meta)?
            .aggregate
            .mean_iou;
        seeds.push(SeedOutcome {
            seed,
            fused_iou: fused,
            dummy_iou: dummy,
            margin: fused - dummy,
            probe_before,
            probe_after,
            curve: report.curve,
        });
    }
    Ok(FusionOutcome {
        study_hash: config_hash(study),
        pretrain_curve: pre.curve,
        seeds,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
