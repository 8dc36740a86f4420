//! One-stream transformer tracker.
//!
//! Template and search tokens are concatenated and run through pre-norm
//! attention blocks. After selected blocks the search slice is replaced by
//! the prompt block output, fed by the shared embedding of the auxiliary
//! frame. A per-token head predicts an objectness logit and a box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::join;
use crate::autodiff::{concat_cols, concat_rows, LinearLayer, Parameters, Tape, Tensor, Var};
use crate::edge::GradientFeatureBuilder;
use crate::error::{Error, Result};
use crate::lora::{wrap_attention, Projection};
use crate::modality::Modality;
use crate::prompt::{PromptBlock, PromptMode};
use crate::scalar::Scalar;
use crate::shared_embed::{AbsentRoute, SharedEmbedBlock, SharedEmbedConfig};

const LN_EPS: f64 = 1e-5;

/// Component switches. Everything on is the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Switches {
    pub explicit_edge: bool,
    pub implicit_learning: bool,
    pub in_domain_approx: bool,
    /// Off: the auxiliary tokens enter prompting directly.
    pub shared_embed: bool,
    /// Off: the frozen backbone gets no adapters.
    pub lora: bool,
    /// Off: no prompting at all, the tracker is RGB-only.
    pub prompt: bool,
    /// Replace prompting by plain token addition.
    pub prompt_bypass: bool,
    pub prompt_residual: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            explicit_edge: true,
            implicit_learning: true,
            in_domain_approx: true,
            shared_embed: true,
            lora: true,
            prompt: true,
            prompt_bypass: false,
            prompt_residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub image_size: usize,
    pub template_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rank_k: usize,
    pub rank_l: usize,
    pub lora_rank: usize,
    /// `None` leaves the adapter path unscaled.
    pub lora_alpha: Option<f64>,
    pub percentile: f64,
    /// 1-based block indices after which prompting runs.
    pub prompt_layers: Vec<usize>,
    pub hidden_mlp: bool,
    pub rgb_luminance: bool,
    pub absent_route: AbsentRoute,
    pub switches: Switches,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            template_size: 32,
            patch_size: 8,
            embed_dim: 48,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            rank_k: 4,
            rank_l: 8,
            lora_rank: 4,
            lora_alpha: None,
            percentile: 0.25,
            prompt_layers: vec![2, 4, 6],
            hidden_mlp: false,
            rgb_luminance: false,
            absent_route: AbsentRoute::Depth,
            switches: Switches::default(),
        }
    }
}

impl TrackerConfig {
    /// Smallest configuration exercising every component.
    pub fn miniature() -> Self {
        Self {
            image_size: 16,
            template_size: 8,
            patch_size: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            rank_k: 2,
            rank_l: 4,
            lora_rank: 2,
            prompt_layers: vec![1, 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_size % p != 0 || self.template_size % p != 0 {
            return Err(Error::Config(format!(
                "image {} and template {} must be multiples of patch {p}",
                self.image_size, self.template_size
            )));
        }
        if self.template_size > self.image_size {
            return Err(Error::Config("template larger than search image".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp ratio must be positive".into()));
        }
        if let Some(&l) = self
            .prompt_layers
            .iter()
            .find(|&&l| l == 0 || l > self.depth)
        {
            return Err(Error::Config(format!(
                "prompt layer {l} outside 1..={}",
                self.depth
            )));
        }
        if !(self.percentile > 0.0 && self.percentile <= 0.5) {
            return Err(Error::Config(format!(
                "percentile {} outside (0, 1/2]",
                self.percentile
            )));
        }
        for (name, r) in [
            ("rank_k", self.rank_k),
            ("rank_l", self.rank_l),
            ("lora_rank", self.lora_rank),
        ] {
            if r == 0 || r >= self.embed_dim {
                return Err(Error::Config(format!(
                    "{name} {r} must lie in 1..{}",
                    self.embed_dim
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn search_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn template_tokens(&self) -> usize {
        let g = self.template_size / self.patch_size;
        g * g
    }

    fn shared_embed_config(&self) -> SharedEmbedConfig {
        let mut c = SharedEmbedConfig::new(self.embed_dim, self.rank_k);
        c.explicit_edge = self.switches.explicit_edge;
        c.implicit_learning = self.switches.implicit_learning;
        c.in_domain_approx = self.switches.in_domain_approx;
        c.absent_route = self.absent_route;
        c.hidden_mlp = self.hidden_mlp;
        c
    }
}

/// Box in normalized search-region coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.is_valid() {
            return Err(Error::Domain(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.cx)
            && unit(self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Areas come from the same corners as the intersection, so identical
    /// boxes give exactly 1.
    fn overlap(&self, other: &BBox) -> (f64, f64, f64) {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
        let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
        (inter, union, hull)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union, _) = self.overlap(other);
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &BBox) -> f64 {
        let (inter, union, hull) = self.overlap(other);
        if union <= 0.0 || hull <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Center distance in pixels for a square region of side `size`.
    pub fn center_error(&self, other: &BBox, size: usize) -> f64 {
        let s = size as f64;
        ((self.cx - other.cx) * s).hypot((self.cy - other.cy) * s)
    }
}

/// Splits a `[C, H, W]` frame into raster-ordered `p×p` patches, one row
/// per patch with columns ordered channel, row, column.
pub fn patchify<S: Scalar>(frame: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (c, h, w) = match frame.dims()[..] {
        [c, h, w] => (c, h, w),
        ref d => return Err(Error::shape(format!("expected a [C,H,W] frame, got {d:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Size(format!(
            "{h}x{w} frame is not tiled by patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let src = frame.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let base = ch * h * w + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[base..base + p]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, c * p * p], out, false)
}

/// Multi-head self-attention with four projections.
#[derive(Debug, Clone)]
pub struct Attention<S> {
    pub q: Projection<S>,
    pub k: Projection<S>,
    pub v: Projection<S>,
    pub o: Projection<S>,
    pub heads: usize,
}

impl<S: Scalar> Attention<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Self {
        let mut proj = || Projection::Plain(LinearLayer::new(width, width, true, rng));
        Self {
            q: proj(),
            k: proj(),
            v: proj(),
            o: proj(),
            heads,
        }
    }

    pub fn projections(&self) -> [&Projection<S>; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn projections_mut(&mut self) -> [&mut Projection<S>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let dh = x.cols() / self.heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let att = q
                .slice_cols(a, b)?
                .matmul_nt(k.slice_cols(a, b)?)?
                .scale(scale)
                .softmax_rows()?;
            outs.push(att.matmul(v.slice_cols(a, b)?)?);
        }
        self.o.forward(tape, concat_cols(&outs)?)
    }
}

impl<S: Scalar> Parameters<S> for Attention<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (name, p) in ["q", "k", "v", "o"].into_iter().zip(self.projections()) {
            p.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (name, p) in ["q", "k", "v", "o"].into_iter().zip(self.projections_mut()) {
            p.visit_mut(&join(prefix, name), f);
        }
    }
}

/// `x + attn(LN(x))`, then `x + fc2(relu(fc1(LN(x))))`.
#[derive(Debug, Clone)]
pub struct Block<S> {
    pub attn: Attention<S>,
    pub fc1: LinearLayer<S>,
    pub fc2: LinearLayer<S>,
}

impl<S: Scalar> Block<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            attn: Attention::new(width, heads, rng),
            fc1: LinearLayer::new(width, width * mlp_ratio, true, rng),
            fc2: LinearLayer::new(width * mlp_ratio, width, true, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let eps = S::lit(LN_EPS);
        let x = x.add(self.attn.forward(tape, x.layer_norm(eps)?)?)?;
        let h = self.fc1.forward(tape, x.layer_norm(eps)?)?.relu();
        x.add(self.fc2.forward(tape, h)?)
    }
}

impl<S: Scalar> Parameters<S> for Block<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Auxiliary frame of the search region.
#[derive(Debug, Clone, Copy)]
pub struct AuxInput<'a, S> {
    pub frame: &'a Tensor<S>,
    pub modality: Modality,
}

pub struct TrackOutput<'t, S: Scalar> {
    /// Objectness logits, `[n_s, 1]`.
    pub scores: Var<'t, S>,
    /// Decoded boxes `(cx, cy, w, h)`, `[n_s, 4]`.
    pub boxes: Var<'t, S>,
}

#[derive(Debug, Clone)]
pub struct UnTrack<S> {
    pub config: TrackerConfig,
    pub patch_embed: LinearLayer<S>,
    pub pos_template: Tensor<S>,
    pub pos_search: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub head_score: LinearLayer<S>,
    pub head_box: LinearLayer<S>,
    pub edge: GradientFeatureBuilder<S>,
    pub shared: SharedEmbedBlock<S>,
    pub prompts: Vec<PromptBlock<S>>,
}

impl<S: Scalar> UnTrack<S> {
    /// Everything trainable, no adapters attached.
    pub fn new<R: Rng + ?Sized>(config: TrackerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p = config.patch_size;
        let pos_bound = 0.02;
        let patch_embed = LinearLayer::new(3 * p * p, c, true, rng);
        let pos_template = Tensor::uniform(&[config.template_tokens(), c], pos_bound, rng)
            .with_requires_grad(true);
        let pos_search =
            Tensor::uniform(&[config.search_tokens(), c], pos_bound, rng).with_requires_grad(true);
        let blocks = (0..config.depth)
            .map(|_| Block::new(c, config.heads, config.mlp_ratio, rng))
            .collect();
        let head_score = LinearLayer::new(c, 1, true, rng);
        let head_box = LinearLayer::new(c, 4, true, rng);
        let edge = GradientFeatureBuilder::new(c, p, config.rgb_luminance, 3, rng);
        let shared = SharedEmbedBlock::new(config.shared_embed_config(), rng)?;
        let mut prompts = Vec::with_capacity(config.prompt_layers.len());
        for _ in &config.prompt_layers {
            let mut pb = PromptBlock::new(c, config.rank_l, config.percentile, rng)?;
            pb.residual = config.switches.prompt_residual;
            if config.switches.prompt_bypass {
                pb.mode = PromptMode::Bypass;
            }
            prompts.push(pb);
        }
        Ok(Self {
            config,
            patch_embed,
            pos_template,
            pos_search,
            blocks,
            head_score,
            head_box,
            edge,
            shared,
            prompts,
        })
    }

    /// Freezes the RGB tracker and attaches adapters when enabled. Only
    /// binding, prompting and adapter tensors stay trainable.
    pub fn prepare_finetune<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.visit_backbone_mut(&mut |_, t| t.set_requires_grad(false));
        if self.config.switches.lora {
            let (r, alpha) = (self.config.lora_rank, self.config.lora_alpha);
            for b in &mut self.blocks {
                wrap_attention(&mut b.attn, r, alpha, rng)?;
            }
        }
        Ok(())
    }

    pub fn is_wrapped(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.q.is_wrapped())
    }

    fn visit_backbone_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.patch_embed.visit_mut("patch_embed", f);
        f("pos_template".into(), &mut self.pos_template);
        f("pos_search".into(), &mut self.pos_search);
        self.blocks.visit_mut("blocks", f);
        self.head_score.visit_mut("head.score", f);
        self.head_box.visit_mut("head.box", f);
    }

    fn embed<'t>(
        &self,
        tape: &'t Tape<S>,
        frame: &Tensor<S>,
        pos: &Tensor<S>,
    ) -> Result<Var<'t, S>> {
        let patches = patchify(frame, self.config.patch_size)?;
        if patches.rows() != pos.rows() {
            return Err(Error::Config(format!(
                "frame gives {} tokens, model expects {}",
                patches.rows(),
                pos.rows()
            )));
        }
        self.patch_embed
            .forward(tape, tape.constant(&patches))?
            .add(tape.param(pos))
    }

    /// Modality-agnostic feature `F` of the search region, `[n_s, c]`.
    pub fn fused_feature<'t>(
        &self,
        tape: &'t Tape<S>,
        search: &Tensor<S>,
        search_tokens: Var<'t, S>,
        aux: AuxInput<'_, S>,
    ) -> Result<Var<'t, S>> {
        let aux_tokens = self.embed(tape, aux.frame, &self.pos_search)?;
        if !self.config.switches.shared_embed {
            return Ok(aux_tokens);
        }
        let aux_img = (aux.modality != Modality::Absent).then(|| tape.constant(aux.frame));
        let g = self
            .edge
            .build(tape, tape.constant(search), aux_img, search_tokens)?;
        self.shared.forward(tape, aux_tokens, aux.modality, g)
    }

    /// `aux = None` runs the plain RGB tracker.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        template: &Tensor<S>,
        search: &Tensor<S>,
        aux: Option<AuxInput<'_, S>>,
    ) -> Result<TrackOutput<'t, S>> {
        let cfg = &self.config;
        let nt = cfg.template_tokens();
        let ns = cfg.search_tokens();
        let zt = self.embed(tape, template, &self.pos_template)?;
        let zs = self.embed(tape, search, &self.pos_search)?;
        let fused = match aux {
            Some(a) if cfg.switches.prompt => {
                if a.frame.dims() != search.dims() {
                    return Err(Error::Config(format!(
                        "auxiliary frame {:?} vs search frame {:?}",
                        a.frame.dims(),
                        search.dims()
                    )));
                }
                Some(self.fused_feature(tape, search, zs, a)?)
            }
            _ => None,
        };
        let mut x = concat_rows(&[zt, zs])?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x)?;
            let Some(f) = fused else { continue };
            if let Some(j) = cfg.prompt_layers.iter().position(|&l| l == i + 1) {
                let s = self.prompts[j].forward(tape, x.slice_rows(nt, nt + ns)?, f)?;
                x = concat_rows(&[x.slice_rows(0, nt)?, s])?;
            }
        }
        let s = x.slice_rows(nt, nt + ns)?.layer_norm(S::lit(LN_EPS))?;
        let scores = self.head_score.forward(tape, s)?;
        let raw = self.head_box.forward(tape, s)?;
        let (offsets, scale) = self.box_grid();
        let boxes = raw
            .sigmoid()
            .add(tape.constant(&offsets))?
            .mul(tape.constant(&scale))?;
        Ok(TrackOutput { scores, boxes })
    }

    /// Token-cell offsets `[col, row, 0, 0]` and scale `[1/g, 1/g, 1, 1]`.
    fn box_grid(&self) -> (Tensor<S>, Tensor<S>) {
        let g = self.config.grid();
        let mut off = Vec::with_capacity(g * g * 4);
        for row in 0..g {
            for col in 0..g {
                off.extend([S::lit(col as f64), S::lit(row as f64), S::zero(), S::zero()]);
            }
        }
        let inv = S::lit(1.0 / g as f64);
        (
            Tensor::new(&[g * g, 4], off, false).expect("grid dims"),
            Tensor::new(&[1, 4], vec![inv, inv, S::one(), S::one()], false).expect("scale dims"),
        )
    }

    /// Index of the token whose cell contains the point.
    pub fn token_at(&self, cx: f64, cy: f64) -> usize {
        let g = self.config.grid();
        let cell = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
        cell(cy) * g + cell(cx)
    }
}

/// Box of the highest-scoring token and its sigmoid confidence. Ties go to
/// the lowest index.
pub fn predict_bbox<S: Scalar>(scores: &[S], boxes: &[S]) -> Result<(BBox, f64)> {
    if scores.is_empty() || boxes.len() != 4 * scores.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} box values",
            scores.len(),
            boxes.len()
        )));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let b: Vec<f64> = boxes[4 * best..4 * best + 4]
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let conf = crate::autodiff::kernels::sigmoid(scores[best].to_f64_lossy());
    Ok((
        BBox {
            cx: b[0].clamp(0.0, 1.0),
            cy: b[1].clamp(0.0, 1.0),
            w: b[2],
            h: b[3],
        },
        conf,
    ))
}

impl<S: Scalar> Parameters<S> for UnTrack<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_template"), &self.pos_template);
        f(join(prefix, "pos_search"), &self.pos_search);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.head_score.visit(&join(prefix, "head.score"), f);
        self.head_box.visit(&join(prefix, "head.box"), f);
        self.edge.visit(&join(prefix, "edge"), f);
        self.shared.visit(&join(prefix, "shared"), f);
        self.prompts.visit(&join(prefix, "prompt"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_template"), &mut self.pos_template);
        f(join(prefix, "pos_search"), &mut self.pos_search);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.head_score.visit_mut(&join(prefix, "head.score"), f);
        self.head_box.visit_mut(&join(prefix, "head.box"), f);
        self.edge.visit_mut(&join(prefix, "edge"), f);
        self.shared.visit_mut(&join(prefix, "shared"), f);
        self.prompts.visit_mut(&join(prefix, "prompt"), f);
    }
}

#[cfg(test)]
mod tests;
