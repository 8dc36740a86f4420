//! Decoupled-weight-decay Adam over trainable tensors, with modality
//! round-robin sampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor};
use crate::backbone::{AuxInput, BBox, UnTrack};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;
use crate::synth::ModalSequence;

use super::loss::{tracking_loss, LossParts, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples per step, all of the step's modality.
    pub batch: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Off: the auxiliary stream is ignored and the tracker runs RGB-only.
    pub use_aux: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 1,
            grad_clip: 1.0,
            loss: LossWeights::default(),
            seed: 0,
            use_aux: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(format!(
                "batch {}, lr {}, weight decay {} and clip {} must be valid",
                self.batch, self.lr, self.weight_decay, self.grad_clip
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam moments keyed by tensor name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable tensor holding a gradient and
    /// returns the gradient norm before clipping.
    pub fn step<S: Scalar, M: Parameters<S> + ?Sized>(
        &mut self,
        model: &mut M,
        cfg: &TrainConfig,
    ) -> f64 {
        let norm = grad_norm(model);
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let Some(g) = t.grad().map(|g| {
                g.iter()
                    .map(|v| v.to_f64_lossy() * clip)
                    .collect::<Vec<_>>()
            }) else {
                return;
            };
            let m = m_all
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = v_all.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                let wf = w.to_f64_lossy();
                *w = S::lit(wf - cfg.lr * (cfg.weight_decay * wf + update));
            }
        });
        norm
    }
}

pub fn grad_norm<S: Scalar, M: Parameters<S> + ?Sized>(model: &M) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, t| {
        if let (true, Some(g)) = (t.requires_grad(), t.grad()) {
            sq += g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Template crop of `size` pixels centred on the box, shifted inside the frame.
pub fn crop_template(frame: &Tensor<f64>, truth: &BBox, size: usize) -> Result<Tensor<f64>> {
    let (c, h, w) = match frame.dims()[..] {
        [c, h, w] => (c, h, w),
        ref d => return Err(Error::shape(format!("expected a [C,H,W] frame, got {d:?}"))),
    };
    if size > h || size > w {
        return Err(Error::Config(format!(
            "template {size} exceeds frame {h}x{w}"
        )));
    }
    let start = |center: f64, extent: usize| -> usize {
        let s = (center * extent as f64 - size as f64 / 2.0).round();
        s.clamp(0.0, (extent - size) as f64) as usize
    };
    let (y0, x0) = (start(truth.cy, h), start(truth.cx, w));
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&frame.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(&[c, size, size], out, false)
}

/// Sequence converted to the model scalar with its template cut once.
pub struct PreparedSequence<S> {
    pub template: Tensor<S>,
    pub rgb: Vec<Tensor<S>>,
    pub aux: Vec<Tensor<S>>,
    pub truth: Vec<BBox>,
    pub modality: Modality,
}

fn convert<S: Scalar>(t: &Tensor<f64>) -> Tensor<S> {
    Tensor::from_f64(t.dims(), t.data()).expect("same dims")
}

impl<S: Scalar> PreparedSequence<S> {
    /// `dummy` swaps the auxiliary stream for zero frames tagged absent.
    pub fn new(seq: &ModalSequence, template_size: usize, dummy: bool) -> Result<Self> {
        let first = seq
            .samples
            .first()
            .ok_or_else(|| Error::Size("empty sequence".into()))?;
        let template = convert(&crop_template(&first.rgb, &first.truth, template_size)?);
        let modality = if dummy {
            Modality::Absent
        } else {
            first.modality
        };
        let rgb = seq.samples.iter().map(|s| convert(&s.rgb)).collect();
        let aux = seq
            .samples
            .iter()
            .map(|s| match (&s.aux, dummy) {
                (Some(a), false) => convert(a),
                _ => Tensor::zeros(s.rgb.dims()),
            })
            .collect();
        let truth = seq.samples.iter().map(|s| s.truth).collect();
        Ok(Self {
            template,
            rgb,
            aux,
            truth,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn aux_input(&self, t: usize) -> AuxInput<'_, S> {
        AuxInput {
            frame: &self.aux[t],
            modality: self.modality,
        }
    }
}

/// Loss of one frame; gradients are accumulated into the model when
/// `backprop` is set.
pub fn frame_loss<S: Scalar>(
    model: &mut UnTrack<S>,
    seq: &PreparedSequence<S>,
    t: usize,
    cfg: &TrainConfig,
    scale: f64,
    backprop: bool,
) -> Result<LossParts> {
    let tape = Tape::new();
    let aux = cfg.use_aux.then(|| seq.aux_input(t));
    let out = model.forward(&tape, &seq.template, &seq.rgb[t], aux)?;
    let truth = seq.truth[t];
    let positive = model.token_at(truth.cx, truth.cy);
    let (loss, parts) = tracking_loss(&out, &truth, positive, &cfg.loss)?;
    if backprop && parts.total.is_finite() {
        let grads = tape.backward(loss.scale(S::lit(scale)))?;
        model.accumulate_grads(&grads)?;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub curve: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

fn diagnostics<S: Scalar>(model: &UnTrack<S>, step: usize, loss: f64) -> String {
    let mut norms = Vec::new();
    model.visit("", &mut |name, t| {
        if let (true, Some(g)) = (t.requires_grad(), t.grad()) {
            let n = g
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            norms.push(format!("{name}={n:.3e}"));
        }
    });
    format!(
        "non-finite training state at step {step}: loss {loss}; grad norms [{}]",
        norms.join(", ")
    )
}

/// Frame indices `1..len`, or `0` for single-frame sequences.
fn pick_frame(len: usize, rng: &mut ChaCha8Rng) -> usize {
    if len > 1 {
        rng.gen_range(1..len)
    } else {
        0
    }
}

pub fn train<S: Scalar>(
    model: &mut UnTrack<S>,
    data: &[ModalSequence],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let prepared: Vec<PreparedSequence<S>> = data
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| PreparedSequence::new(s, model.config.template_size, false))
        .collect::<Result<_>>()?;
    if prepared.is_empty() && cfg.steps > 0 {
        return Err(Error::Size(
            "training needs at least one nonempty sequence".into(),
        ));
    }
    // One group per modality present, in a fixed order.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for m in [
        Modality::Depth,
        Modality::Thermal,
        Modality::Event,
        Modality::Absent,
    ] {
        let g: Vec<usize> = (0..prepared.len())
            .filter(|&i| prepared[i].modality == m)
            .collect();
        if !g.is_empty() {
            groups.push(g);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new();
    let mut report = TrainReport {
        curve: Vec::with_capacity(cfg.steps),
        grad_norms: Vec::with_capacity(cfg.steps),
    };
    let scale = 1.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        model.zero_grad();
        let group = &groups[step % groups.len()];
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let seq = &prepared[group[rng.gen_range(0..group.len())]];
            let t = pick_frame(seq.len(), &mut rng);
            let parts = match frame_loss(model, seq, t, cfg, scale, true) {
                Err(Error::Numeric(msg)) => {
                    return Err(Error::Numeric(format!(
                        "{msg}; {}",
                        diagnostics(model, step, f64::NAN)
                    )))
                }
                other => other?,
            };
            total += parts.total * scale;
        }
        let norm = grad_norm(model);
        if !total.is_finite() || !norm.is_finite() {
            return Err(Error::Numeric(diagnostics(model, step, total)));
        }
        opt.step(model, cfg);
        report.curve.push(total);
        report.grad_norms.push(norm);
    }
    model.zero_grad();
    Ok(report)
}

/// Mean loss over up to `per_seq` evenly spaced frames of each sequence.
pub fn probe_loss<S: Scalar>(
    model: &mut UnTrack<S>,
    data: &[ModalSequence],
    cfg: &TrainConfig,
    per_seq: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in data.iter().filter(|s| !s.is_empty()) {
        let p = PreparedSequence::<S>::new(seq, model.config.template_size, false)?;
        let len = p.len();
        let frames: Vec<usize> = if len > 1 {
            let k = per_seq.min(len - 1).max(1);
            (0..k).map(|i| 1 + i * (len - 1) / k).collect()
        } else {
            vec![0]
        };
        for t in frames {
            sum += frame_loss(model, &p, t, cfg, 1.0, false)?.total;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Size("no frames to probe".into()));
    }
    Ok(sum / count as f64)
}
