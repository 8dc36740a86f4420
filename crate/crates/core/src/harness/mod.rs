//! Training, evaluation, ablation and checkpoint plumbing.

pub mod ablation;
pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod study;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Parameters;
use crate::backbone::{TrackerConfig, UnTrack};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use ablation::{ablation_grid, AblationAxis, AblationRun, Component};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use eval::{
    evaluate, evaluate_model, MetricsReport, ModelPredictor, OraclePredictor, Predictor, RunMeta,
    StaticPredictor,
};
pub use loss::{tracking_loss, LossWeights};
pub use metrics::f_score;
pub use study::{run_fusion_study, FusionOutcome, FusionStudy};
pub use train::{train, TrainConfig, TrainReport};

/// SHA-256 over the JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Names owned by the RGB tracker, as opposed to fusion modules.
pub fn is_backbone_tensor(name: &str) -> bool {
    !(name.starts_with("edge.")
        || name.starts_with("shared.")
        || name.starts_with("prompt.")
        || name.contains("lora_"))
}

/// Copies every backbone tensor of `src` into `dst` by name.
pub fn copy_backbone<S: Scalar>(src: &UnTrack<S>, dst: &mut UnTrack<S>) -> Result<()> {
    let from: std::collections::BTreeMap<String, &crate::autodiff::Tensor<S>> = src
        .named_params()
        .into_iter()
        .filter(|(n, _)| is_backbone_tensor(n))
        .collect();
    let mut result = Ok(());
    dst.visit_mut("", &mut |name, t| {
        if result.is_err() || !is_backbone_tensor(&name) {
            return;
        }
        match from.get(&name) {
            Some(s) if s.dims() == t.dims() => t.data_mut().copy_from_slice(s.data()),
            _ => {
                result = Err(Error::Config(format!(
                    "backbone tensor '{name}' missing or reshaped"
                )))
            }
        }
    });
    result
}

/// Fresh fusion modules over a frozen backbone, adapters attached.
pub fn finetune_model<S: Scalar>(
    cfg: &TrackerConfig,
    pretrained: Option<&UnTrack<S>>,
    seed: u64,
) -> Result<UnTrack<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = UnTrack::new(cfg.clone(), &mut rng)?;
    if let Some(p) = pretrained {
        copy_backbone(p, &mut model)?;
    }
    model.prepare_finetune(&mut rng)?;
    Ok(model)
}

/// RGB-only training of a fresh tracker with every tensor trainable.
pub fn pretrain_backbone<S: Scalar>(
    cfg: &TrackerConfig,
    data: &[crate::synth::ModalSequence],
    train_cfg: &TrainConfig,
) -> Result<(UnTrack<S>, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = UnTrack::new(cfg.clone(), &mut rng)?;
    let rgb_only = TrainConfig {
        use_aux: false,
        ..train_cfg.clone()
    };
    let report = train(&mut model, data, &rgb_only)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests;
