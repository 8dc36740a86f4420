//! Plain-text `key = value` run configuration with command-line overrides.
//!
//! Every key can appear in a file or as a flag: `rank_k = 8` in a file is
//! `--rank-k 8` (or `--rank-k=8`) on the command line. Boolean flags given
//! without a value mean `true`. Flags are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::TrackerConfig;
use crate::error::{Error, Result};
use crate::harness::ablation::{parse_fraction, AblationAxis};
use crate::harness::{config_hash, TrainConfig};
use crate::shared_embed::AbsentRoute;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Option<String>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Sequences scored by `ablate`; the training dataset when unset.
    pub eval_dataset: Option<PathBuf>,
    pub tracker: TrackerConfig,
    /// Fine-tuning schedule; its seed is the run seed.
    pub train: TrainConfig,
    /// RGB-only steps that produce the frozen backbone.
    pub pretrain_steps: usize,
    pub dummy_mode: bool,
    pub ablation_axis: AblationAxis,
    /// Empty means the reference grid of the axis.
    pub ablation_values: Vec<String>,
    /// Sequences at normal contrast written by `gen-data`.
    pub sequences: usize,
    /// Low-contrast cluttered sequences written by `gen-data`.
    pub corner_sequences: usize,
    pub frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            dataset: None,
            output: None,
            checkpoint: None,
            eval_dataset: None,
            tracker: TrackerConfig::default(),
            train: TrainConfig {
                steps: 800,
                ..TrainConfig::default()
            },
            pretrain_steps: 1000,
            dummy_mode: false,
            ablation_axis: AblationAxis::RankK,
            ablation_values: Vec::new(),
            sequences: 18,
            corner_sequences: 18,
            frames: 16,
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "command",
    "dataset",
    "output",
    "checkpoint",
    "eval_dataset",
    "seed",
    "dummy_mode",
    "image_size",
    "template_size",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "rank_k",
    "rank_l",
    "lora_rank",
    "lora_alpha",
    "percentile",
    "prompt_layers",
    "hidden_mlp",
    "rgb_luminance",
    "absent_route",
    "explicit_edge",
    "implicit_learning",
    "in_domain_approx",
    "shared_embed",
    "lora",
    "prompt",
    "prompt_bypass",
    "prompt_residual",
    "w_cls",
    "w_l1",
    "w_giou",
    "steps",
    "pretrain_steps",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "batch",
    "grad_clip",
    "use_aux",
    "ablation_axis",
    "ablation_values",
    "sequences",
    "corner_sequences",
    "frames",
];

fn is_bool_key(key: &str) -> bool {
    matches!(
        key,
        "dummy_mode"
            | "hidden_mlp"
            | "rgb_luminance"
            | "explicit_edge"
            | "implicit_learning"
            | "in_domain_approx"
            | "shared_embed"
            | "lora"
            | "prompt"
            | "prompt_bypass"
            | "prompt_residual"
            | "use_aux"
    )
}

fn mismatch(key: &str, value: &str, want: &str) -> Error {
    Error::Usage(format!("key '{key}': expected {want}, got '{value}'"))
}

fn int(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| mismatch(key, v, "a non-negative integer"))
}

fn uint64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| mismatch(key, v, "a non-negative integer"))
}

fn float(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(mismatch(key, v, "a finite number")),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(mismatch(key, v, "true or false")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.tracker;
        let s = &mut t.switches;
        let tr = &mut self.train;
        match key {
            "command" => self.command = (!v.is_empty()).then(|| v.to_string()),
            "dataset" => self.dataset = path(v),
            "output" => self.output = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "eval_dataset" => self.eval_dataset = path(v),
            "seed" => tr.seed = uint64(key, v)?,
            "dummy_mode" => self.dummy_mode = boolean(key, v)?,
            "image_size" => t.image_size = int(key, v)?,
            "template_size" => t.template_size = int(key, v)?,
            "patch_size" => t.patch_size = int(key, v)?,
            "embed_dim" => t.embed_dim = int(key, v)?,
            "depth" => t.depth = int(key, v)?,
            "heads" => t.heads = int(key, v)?,
            "mlp_ratio" => t.mlp_ratio = int(key, v)?,
            "rank_k" => t.rank_k = int(key, v)?,
            "rank_l" => t.rank_l = int(key, v)?,
            "lora_rank" => t.lora_rank = int(key, v)?,
            "lora_alpha" => {
                t.lora_alpha = match v {
                    "" | "none" => None,
                    _ => Some(float(key, v)?),
                }
            }
            "percentile" => {
                t.percentile =
                    parse_fraction(v).map_err(|_| mismatch(key, v, "a number or fraction"))?
            }
            "prompt_layers" => {
                t.prompt_layers = list(v).iter().map(|x| int(key, x)).collect::<Result<_>>()?
            }
            "hidden_mlp" => t.hidden_mlp = boolean(key, v)?,
            "rgb_luminance" => t.rgb_luminance = boolean(key, v)?,
            "absent_route" => {
                t.absent_route = match v {
                    "depth" => AbsentRoute::Depth,
                    "dedicated" => AbsentRoute::Dedicated,
                    _ => return Err(mismatch(key, v, "depth or dedicated")),
                }
            }
            "explicit_edge" => s.explicit_edge = boolean(key, v)?,
            "implicit_learning" => s.implicit_learning = boolean(key, v)?,
            "in_domain_approx" => s.in_domain_approx = boolean(key, v)?,
            "shared_embed" => s.shared_embed = boolean(key, v)?,
            "lora" => s.lora = boolean(key, v)?,
            "prompt" => s.prompt = boolean(key, v)?,
            "prompt_bypass" => s.prompt_bypass = boolean(key, v)?,
            "prompt_residual" => s.prompt_residual = boolean(key, v)?,
            "w_cls" => tr.loss.w_cls = float(key, v)?,
            "w_l1" => tr.loss.w_l1 = float(key, v)?,
            "w_giou" => tr.loss.w_giou = float(key, v)?,
            "steps" => tr.steps = int(key, v)?,
            "pretrain_steps" => self.pretrain_steps = int(key, v)?,
            "lr" => tr.lr = float(key, v)?,
            "weight_decay" => tr.weight_decay = float(key, v)?,
            "beta1" => tr.beta1 = float(key, v)?,
            "beta2" => tr.beta2 = float(key, v)?,
            "eps" => tr.eps = float(key, v)?,
            "batch" => tr.batch = int(key, v)?,
            "grad_clip" => tr.grad_clip = float(key, v)?,
            "use_aux" => tr.use_aux = boolean(key, v)?,
            "ablation_axis" => {
                self.ablation_axis = v.parse().map_err(|_| {
                    mismatch(
                        key,
                        v,
                        "rank_k, rank_l, lora_rank, percentile or component_switch",
                    )
                })?
            }
            "ablation_values" => self.ablation_values = list(v),
            "sequences" => self.sequences = int(key, v)?,
            "corner_sequences" => self.corner_sequences = int(key, v)?,
            "frames" => self.frames = int(key, v)?,
            _ => return Err(Error::Usage(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Textual value of one key; `set(key, get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.tracker;
        let s = &t.switches;
        let tr = &self.train;
        let p = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        Some(match key {
            "command" => self.command.clone().unwrap_or_default(),
            "dataset" => p(&self.dataset),
            "output" => p(&self.output),
            "checkpoint" => p(&self.checkpoint),
            "eval_dataset" => p(&self.eval_dataset),
            "seed" => tr.seed.to_string(),
            "dummy_mode" => self.dummy_mode.to_string(),
            "image_size" => t.image_size.to_string(),
            "template_size" => t.template_size.to_string(),
            "patch_size" => t.patch_size.to_string(),
            "embed_dim" => t.embed_dim.to_string(),
            "depth" => t.depth.to_string(),
            "heads" => t.heads.to_string(),
            "mlp_ratio" => t.mlp_ratio.to_string(),
            "rank_k" => t.rank_k.to_string(),
            "rank_l" => t.rank_l.to_string(),
            "lora_rank" => t.lora_rank.to_string(),
            "lora_alpha" => t.lora_alpha.map_or("none".into(), |a| a.to_string()),
            "percentile" => t.percentile.to_string(),
            "prompt_layers" => t
                .prompt_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "hidden_mlp" => t.hidden_mlp.to_string(),
            "rgb_luminance" => t.rgb_luminance.to_string(),
            "absent_route" => match t.absent_route {
                AbsentRoute::Depth => "depth".into(),
                AbsentRoute::Dedicated => "dedicated".into(),
            },
            "explicit_edge" => s.explicit_edge.to_string(),
            "implicit_learning" => s.implicit_learning.to_string(),
            "in_domain_approx" => s.in_domain_approx.to_string(),
            "shared_embed" => s.shared_embed.to_string(),
            "lora" => s.lora.to_string(),
            "prompt" => s.prompt.to_string(),
            "prompt_bypass" => s.prompt_bypass.to_string(),
            "prompt_residual" => s.prompt_residual.to_string(),
            "w_cls" => tr.loss.w_cls.to_string(),
            "w_l1" => tr.loss.w_l1.to_string(),
            "w_giou" => tr.loss.w_giou.to_string(),
            "steps" => tr.steps.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "lr" => tr.lr.to_string(),
            "weight_decay" => tr.weight_decay.to_string(),
            "beta1" => tr.beta1.to_string(),
            "beta2" => tr.beta2.to_string(),
            "eps" => tr.eps.to_string(),
            "batch" => tr.batch.to_string(),
            "grad_clip" => tr.grad_clip.to_string(),
            "use_aux" => tr.use_aux.to_string(),
            "ablation_axis" => self.ablation_axis.as_str().into(),
            "ablation_values" => self.ablation_values.join(","),
            "sequences" => self.sequences.to_string(),
            "corner_sequences" => self.corner_sequences.to_string(),
            "frames" => self.frames.to_string(),
            _ => return None,
        })
    }

    /// All keys, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Applies a `key = value` document. `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!(
                    "line {}: expected key = value, got '{line}'",
                    n + 1
                ))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `--key value`, `--key=value` and bare boolean `--key` flags.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let raw = args[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::Usage(format!("expected a --key flag, got '{}'", args[i])))?;
            i += 1;
            let (key, value) = match raw.split_once('=') {
                Some((k, v)) => (k.replace('-', "_"), v.to_string()),
                None => {
                    let key = raw.replace('-', "_");
                    let next_is_value = args.get(i).is_some_and(|a| !a.starts_with("--"));
                    if next_is_value {
                        i += 1;
                        (key, args[i - 1].clone())
                    } else if is_bool_key(&key) {
                        (key, "true".to_string())
                    } else if KEYS.contains(&key.as_str()) {
                        return Err(Error::Usage(format!("key '{key}': missing value")));
                    } else {
                        return Err(Error::Usage(format!("unknown key '{key}'")));
                    }
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Checks everything a run needs except command-specific paths.
    pub fn validate(&self) -> Result<()> {
        let rho = self.tracker.percentile;
        if !(rho > 0.0 && rho <= 0.5) {
            return Err(Error::Usage(format!(
                "key 'percentile': {rho} must lie in (0, 1/2]"
            )));
        }
        let usage = |e: Error| match e {
            Error::Config(m) | Error::Rank(m) => Error::Usage(m),
            other => other,
        };
        self.tracker.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.frames < 2 {
            return Err(Error::Usage("key 'frames': need at least 2".into()));
        }
        Ok(())
    }

    /// Fails with a usage error naming `key` when the path is unset.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("missing required key '{key}'")))
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Defaults, then the optional file text, then the flags.
pub fn parse_config(text: Option<&str>, flags: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(t) = text {
        cfg.apply_text(t)?;
    }
    cfg.apply_flags(flags)?;
    cfg.validate()?;
    Ok(cfg)
}
