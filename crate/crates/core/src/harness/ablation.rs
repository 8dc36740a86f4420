//! Configuration grids over ranks, percentile and component switches.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{TrackerConfig, UnTrack};
use crate::error::{Error, Result};
use crate::synth::ModalSequence;

use super::eval::{evaluate_model, MetricsReport, RunMeta};
use super::train::{train, TrainConfig};
use super::{config_hash, finetune_model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    RankK,
    RankL,
    LoraRank,
    Percentile,
    ComponentSwitch,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::RankK,
        AblationAxis::RankL,
        AblationAxis::LoraRank,
        AblationAxis::Percentile,
        AblationAxis::ComponentSwitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RankK => "rank_k",
            Self::RankL => "rank_l",
            Self::LoraRank => "lora_rank",
            Self::Percentile => "percentile",
            Self::ComponentSwitch => "component_switch",
        }
    }

    /// Values of the published grids.
    pub fn reference_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::RankK => &["2", "4", "8"],
            Self::RankL => &["4", "8", "16"],
            Self::LoraRank => &["2", "4", "8"],
            Self::Percentile => &["1/8", "1/4", "1/3"],
            Self::ComponentSwitch => &Component::ALL.map(Component::label),
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == key || (key == "component" && *a == Self::ComponentSwitch))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    NoExplicitEdge,
    NoImplicitLearning,
    NoInDomainApprox,
    NoSharedEmbed,
    NoLoraFinetune,
    PromptReplacement,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::NoExplicitEdge,
        Component::NoImplicitLearning,
        Component::NoInDomainApprox,
        Component::NoSharedEmbed,
        Component::NoLoraFinetune,
        Component::PromptReplacement,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::NoExplicitEdge => "w/o Explicit Edge",
            Self::NoImplicitLearning => "w/o Implicit Learning",
            Self::NoInDomainApprox => "w/o In-domain Approx.",
            Self::NoSharedEmbed => "w/o Shared Embed",
            Self::NoLoraFinetune => "w/o LoRA Finetune",
            Self::PromptReplacement => "Prompt Replacement",
        }
    }

    fn apply(self, cfg: &mut TrackerConfig) {
        let s = &mut cfg.switches;
        match self {
            Self::NoExplicitEdge => s.explicit_edge = false,
            Self::NoImplicitLearning => s.implicit_learning = false,
            Self::NoInDomainApprox => s.in_domain_approx = false,
            Self::NoSharedEmbed => s.shared_embed = false,
            Self::NoLoraFinetune => s.lora = false,
            Self::PromptReplacement => s.prompt_bypass = true,
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |v: &str| -> String {
            v.to_ascii_lowercase()
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect()
        };
        let key = norm(s);
        Self::ALL
            .into_iter()
            .find(|c| norm(c.label()) == key)
            .ok_or_else(|| Error::Config(format!("unknown component switch '{s}'")))
    }
}

/// Parses `0.25` or `1/4`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("'{s}' is not a number or fraction"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Base configuration with one axis set to `value`.
pub fn apply_axis(base: &TrackerConfig, axis: AblationAxis, value: &str) -> Result<TrackerConfig> {
    let mut cfg = base.clone();
    let int = || -> Result<usize> {
        value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{axis} value '{value}' is not an integer")))
    };
    match axis {
        AblationAxis::RankK => cfg.rank_k = int()?,
        AblationAxis::RankL => cfg.rank_l = int()?,
        AblationAxis::LoraRank => cfg.lora_rank = int()?,
        AblationAxis::Percentile => cfg.percentile = parse_fraction(value)?,
        AblationAxis::ComponentSwitch => value.parse::<Component>()?.apply(&mut cfg),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub axis: AblationAxis,
    pub value: String,
    pub config: TrackerConfig,
    pub final_loss: f64,
    pub report: MetricsReport,
}

/// One fine-tune and evaluation per value, all under the same seed and
/// starting from the same frozen backbone.
pub fn ablation_grid(
    base: &TrackerConfig,
    axis: AblationAxis,
    values: &[String],
    train_cfg: &TrainConfig,
    pretrained: Option<&UnTrack<f64>>,
    train_data: &[ModalSequence],
    eval_data: &[ModalSequence],
) -> Result<Vec<AblationRun>> {
    if values.is_empty() {
        return Err(Error::Config(format!("no values given for axis {axis}")));
    }
    let configs: Vec<TrackerConfig> = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<_>>()?;
    let mut runs = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        let mut model = finetune_model(&cfg, pretrained, train_cfg.seed)?;
        let curve = train(&mut model, train_data, train_cfg)?.curve;
        let meta = RunMeta {
            config_hash: config_hash(&(&cfg, train_cfg)),
            seed: train_cfg.seed,
        };
        let report = evaluate_model(&model, eval_data, false, &meta)?;
        runs.push(AblationRun {
            axis,
            value: value.clone(),
            config: cfg,
            final_loss: curve.last().copied().unwrap_or(f64::NAN),
            report,
        });
    }
    Ok(runs)
}

/// One row per run.
pub fn comparison_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from(
        "axis,value,config_hash,seed,final_loss,mean_iou,pr,sr,f_score,precision,recall\n",
    );
    for r in runs {
        let a = &r.report.aggregate;
        writeln!(
            out,
            "{},\"{}\",{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.report.config_hash,
            r.report.seed,
            r.final_loss,
            a.mean_iou,
            a.pr,
            a.sr,
            a.f_score,
            a.precision,
            a.recall
        )
        .expect("string write");
    }
    out
}
