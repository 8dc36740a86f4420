//! Deterministic synthetic RGB+X tracking sequences.
//!
//! A textured static background carries one moving target. The RGB
//! rendering adds the target with a configurable contrast; the auxiliary
//! rendering (depth, thermal or event) sees the target regardless of RGB
//! contrast. Static distractor blobs with the target's colour are part of
//! the clutter and never show up in any auxiliary channel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{utt1, Tensor};
use crate::backbone::BBox;
use crate::error::{Error, Result};
use crate::modality::Modality;

/// Per-pixel event threshold on grayscale differences.
pub const EVENT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Disk,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub image_size: usize,
    pub shape: TargetShape,
    /// Diameter or side in pixels.
    pub size_range: (f64, f64),
    /// Speed in pixels per frame.
    pub velocity_range: (f64, f64),
    pub clutter: f64,
    pub contrast: f64,
    pub occluder: bool,
    /// Target depth at the first and last frame.
    pub depth_range: (f64, f64),
    pub modality: Modality,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(modality: Modality, seed: u64) -> Self {
        Self {
            frames: 16,
            image_size: 64,
            shape: TargetShape::Disk,
            size_range: (10.0, 16.0),
            velocity_range: (0.5, 2.0),
            clutter: 0.3,
            contrast: 0.8,
            occluder: false,
            depth_range: (1.0, 2.0),
            modality,
            seed,
        }
    }

    /// Faint target in heavy clutter.
    pub fn corner_case(modality: Modality, seed: u64) -> Self {
        Self {
            clutter: 0.8,
            contrast: 0.12,
            ..Self::new(modality, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Size("sequence needs at least one frame".into()));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !range_ok(self.size_range) || self.size_range.0 <= 0.0 {
            return Err(Error::Config(format!(
                "bad size range {:?}",
                self.size_range
            )));
        }
        if self.size_range.1 >= self.image_size as f64 {
            return Err(Error::Config("target larger than the image".into()));
        }
        if !range_ok(self.velocity_range) || self.velocity_range.0 < 0.0 {
            return Err(Error::Config(format!(
                "bad velocity range {:?}",
                self.velocity_range
            )));
        }
        if !range_ok(self.depth_range) || self.depth_range.0 <= 0.0 {
            return Err(Error::Config(format!(
                "bad depth range {:?}",
                self.depth_range
            )));
        }
        for (name, v) in [("clutter", self.clutter), ("contrast", self.contrast)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::Config("image must be at least 8 pixels".into()));
        }
        Ok(())
    }

    pub fn target_depth(&self, t: usize) -> f64 {
        let (d0, d1) = self.depth_range;
        if self.frames < 2 {
            d0
        } else {
            d0 + (d1 - d0) * t as f64 / (self.frames - 1) as f64
        }
    }
}

/// One timestep. `aux` is `None` exactly when the modality is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalSample {
    /// `[3, H, W]`
    pub rgb: Tensor<f64>,
    /// `[3, H, W]`, the single auxiliary channel replicated.
    pub aux: Option<Tensor<f64>>,
    pub modality: Modality,
    pub truth: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalSequence {
    pub samples: Vec<ModalSample>,
    pub config: SceneConfig,
}

impl ModalSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Target centre and extent in pixels.
#[derive(Debug, Clone, Copy)]
struct Target {
    x: f64,
    y: f64,
    size: f64,
}

fn covers(shape: TargetShape, t: Target, px: usize, py: usize) -> bool {
    let (dx, dy) = (px as f64 + 0.5 - t.x, py as f64 + 0.5 - t.y);
    let r = t.size / 2.0;
    match shape {
        TargetShape::Disk => dx * dx + dy * dy <= r * r,
        TargetShape::Square => dx.abs() <= r && dy.abs() <= r,
    }
}

/// Static background: tinted gray, block noise and distractor blobs.
fn background(cfg: &SceneConfig, color: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = cfg.image_size;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let block = 4;
    let nb = s.div_ceil(block);
    let blocks: Vec<f64> = (0..nb * nb).map(|_| rng.gen_range(-0.25..0.25)).collect();
    let mut bg = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let v = blocks[(y / block) * nb + x / block] + rng.gen_range(-0.1..0.1);
            for c in 0..3 {
                bg[(c * s + y) * s + x] = 0.35 + tint[c] + cfg.clutter * v;
            }
        }
    }
    let distractors = (cfg.clutter * 4.0).round() as usize;
    for _ in 0..distractors {
        let size = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
        let d = Target {
            x: rng.gen_range(size / 2.0..=s as f64 - size / 2.0),
            y: rng.gen_range(size / 2.0..=s as f64 - size / 2.0),
            size,
        };
        for y in 0..s {
            for x in 0..s {
                if covers(cfg.shape, d, x, y) {
                    for c in 0..3 {
                        bg[(c * s + y) * s + x] += cfg.contrast * color[c];
                    }
                }
            }
        }
    }
    bg
}

fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Target> {
    let s = cfg.image_size as f64;
    let size = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
    let (lo, hi) = (size / 2.0, s - size / 2.0);
    let speed = rng.gen_range(cfg.velocity_range.0..=cfg.velocity_range.1);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let (mut x, mut y) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let reflect = |p: &mut f64, v: &mut f64| {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        }
        *p = p.clamp(lo, hi);
    };
    let mut out = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        out.push(Target { x, y, size });
        x += vx;
        y += vy;
        reflect(&mut x, &mut vx);
        reflect(&mut y, &mut vy);
    }
    out
}

fn truth_box(t: Target, s: usize) -> BBox {
    let s = s as f64;
    BBox {
        cx: t.x / s,
        cy: t.y / s,
        w: t.size / s,
        h: t.size / s,
    }
}

fn replicate(single: Vec<f64>, s: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(3 * single.len());
    for _ in 0..3 {
        data.extend_from_slice(&single);
    }
    Tensor::new(&[3, s, s], data, false).expect("square frame")
}

fn box_target(b: &BBox, s: usize) -> Target {
    let s = s as f64;
    Target {
        x: b.cx * s,
        y: b.cy * s,
        size: b.w * s,
    }
}

/// Auxiliary frames for already rendered RGB frames and their boxes.
pub fn synthesize_aux(
    rgb: &[Tensor<f64>],
    boxes: &[BBox],
    modality: Modality,
    cfg: &SceneConfig,
) -> Result<Vec<Tensor<f64>>> {
    if rgb.len() != boxes.len() {
        return Err(Error::Size(format!(
            "{} frames vs {} boxes",
            rgb.len(),
            boxes.len()
        )));
    }
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(rgb.len());
    match modality {
        Modality::Absent => {
            return Err(Error::Domain(
                "no auxiliary rendering for an absent modality".into(),
            ))
        }
        Modality::Depth => {
            for (t, b) in boxes.iter().enumerate() {
                let target = box_target(b, s);
                let near = 1.0 / cfg.target_depth(t);
                let mut m = vec![0.0; s * s];
                for y in 0..s {
                    for x in 0..s {
                        m[y * s + x] = if covers(cfg.shape, target, x, y) {
                            near
                        } else {
                            0.1 + 0.3 * y as f64 / (s - 1) as f64
                        };
                    }
                }
                out.push(replicate(m, s));
            }
        }
        Modality::Thermal => {
            for b in boxes {
                let target = box_target(b, s);
                let sigma = target.size / 3.0;
                let mut m = vec![0.0; s * s];
                for y in 0..s {
                    for x in 0..s {
                        let dx = x as f64 + 0.5 - target.x;
                        let dy = y as f64 + 0.5 - target.y;
                        m[y * s + x] =
                            0.05 + 0.95 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
                out.push(replicate(m, s));
            }
        }
        Modality::Event => {
            let gray = |f: &Tensor<f64>| -> Vec<f64> {
                let d = f.data();
                (0..s * s)
                    .map(|i| (d[i] + d[s * s + i] + d[2 * s * s + i]) / 3.0)
                    .collect()
            };
            let mut prev: Option<Vec<f64>> = None;
            for f in rgb {
                let cur = gray(f);
                let m = match &prev {
                    None => vec![0.0; s * s],
                    Some(p) => cur
                        .iter()
                        .zip(p)
                        .map(|(a, b)| {
                            let d = (a - b).abs();
                            if d >= EVENT_THRESHOLD {
                                d
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                };
                out.push(replicate(m, s));
                prev = Some(cur);
            }
        }
    }
    Ok(out)
}

/// Pure function of the configuration.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<ModalSequence> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
    let bg = background(cfg, color, &mut rng);
    let path = trajectory(cfg, &mut rng);
    let occluder = cfg.occluder.then(|| {
        let w = (s / 8).max(1);
        (rng.gen_range(0..s - w), w)
    });

    let mut rgb = Vec::with_capacity(cfg.frames);
    for &t in &path {
        let mut f = bg.clone();
        for y in 0..s {
            for x in 0..s {
                if covers(cfg.shape, t, x, y) {
                    for c in 0..3 {
                        f[(c * s + y) * s + x] += cfg.contrast * color[c];
                    }
                }
            }
        }
        if let Some((ox, w)) = occluder {
            for c in 0..3 {
                for y in 0..s {
                    f[(c * s + y) * s + ox..(c * s + y) * s + ox + w].fill(0.3);
                }
            }
        }
        rgb.push(Tensor::new(&[3, s, s], f, false)?);
    }
    let boxes: Vec<BBox> = path.iter().map(|&t| truth_box(t, s)).collect();
    let aux = match cfg.modality {
        Modality::Absent => vec![None; cfg.frames],
        m => synthesize_aux(&rgb, &boxes, m, cfg)?
            .into_iter()
            .map(Some)
            .collect(),
    };
    let samples = rgb
        .into_iter()
        .zip(aux)
        .zip(boxes)
        .map(|((rgb, aux), truth)| ModalSample {
            rgb,
            aux,
            modality: cfg.modality,
            truth,
        })
        .collect();
    Ok(ModalSequence {
        samples,
        config: cfg.clone(),
    })
}

pub fn generate_all(configs: &[SceneConfig]) -> Result<Vec<ModalSequence>> {
    configs.par_iter().map(generate_sequence).collect()
}

/// `count` scenes cycling depth, thermal, event; seeds `seed + i`.
pub fn mixed_configs(count: usize, seed: u64, corner_case: bool) -> Vec<SceneConfig> {
    (0..count)
        .map(|i| {
            let m = Modality::AUXILIARY[i % 3];
            let s = seed.wrapping_add(i as u64);
            if corner_case {
                SceneConfig::corner_case(m, s)
            } else {
                SceneConfig::new(m, s)
            }
        })
        .collect()
}

/// `normal` scenes at default contrast followed by `corner` low-contrast
/// cluttered ones, with disjoint seed ranges derived from `seed`.
pub fn default_mix(normal: usize, corner: usize, seed: u64) -> Vec<SceneConfig> {
    let base = seed.wrapping_mul(1_000_003);
    let mut scenes = mixed_configs(normal, base, false);
    scenes.extend(mixed_configs(corner, base.wrapping_add(500_000), true));
    scenes
}

const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# untrack dataset v1";
const MANIFEST_FOOTER: &str = "# end";

fn frame_name(kind: &str, t: usize) -> String {
    format!("{kind}_{t:04}.utt1")
}

/// Layout: `manifest.txt`, and per sequence a directory with `scene.json`,
/// `boxes.txt` and one UTT1 file per frame and stream. The manifest ends in
/// `# end <count>` so a truncated listing is detectable.
pub fn write_dataset(seqs: &[ModalSequence], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, seq) in seqs.iter().enumerate() {
        let id = format!("seq_{i:04}");
        let sub = dir.join(&id);
        fs::create_dir_all(&sub)?;
        let mut boxes = String::new();
        for (t, s) in seq.samples.iter().enumerate() {
            let b = s.truth;
            writeln!(boxes, "{t} {} {} {} {}", b.cx, b.cy, b.w, b.h).expect("string write");
            utt1::save(&s.rgb, &sub.join(frame_name("rgb", t)))?;
            if let Some(a) = &s.aux {
                utt1::save(a, &sub.join(frame_name("aux", t)))?;
            }
        }
        utt1::write_atomic(&sub.join("boxes.txt"), boxes.as_bytes())?;
        let scene = serde_json::to_string_pretty(&seq.config)
            .map_err(|e| Error::Config(format!("scene config: {e}")))?;
        utt1::write_atomic(&sub.join("scene.json"), scene.as_bytes())?;
        let modality = seq
            .samples
            .first()
            .map_or(seq.config.modality, |s| s.modality);
        writeln!(
            manifest,
            "{id} {modality} {} {id}/boxes.txt {id}/scene.json",
            seq.len()
        )
        .expect("string write");
    }
    writeln!(manifest, "{MANIFEST_FOOTER} {}", seqs.len()).expect("string write");
    utt1::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ModalSequence>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut seqs = Vec::new();
    let mut offset = 0u64;
    let mut footer = None;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        if footer.is_some() {
            return Err(Error::format(here, "content after manifest footer"));
        }
        if !line.ends_with('\n') {
            return Err(Error::format(here, "unterminated manifest line"));
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(n) = line.strip_prefix(MANIFEST_FOOTER) {
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::format(here, format!("bad manifest footer '{line}'")))?;
            footer = Some((here, n));
            continue;
        }
        if line.starts_with('#') {
            if here == 0 && line != MANIFEST_HEADER {
                return Err(Error::format(
                    0,
                    format!("unknown manifest header '{line}'"),
                ));
            }
            continue;
        }
        if here == 0 {
            return Err(Error::format(0, "missing manifest header"));
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, tag, frames, boxes_file, scene_file] = f[..] else {
            return Err(Error::format(
                here,
                format!("expected 5 fields, got {}", f.len()),
            ));
        };
        let modality: Modality = tag
            .parse()
            .map_err(|_| Error::format(here, format!("unknown modality '{tag}'")))?;
        let frames: usize = frames
            .parse()
            .map_err(|_| Error::format(here, format!("bad frame count '{frames}'")))?;
        let scene = fs::read_to_string(dir.join(scene_file))?;
        let config: SceneConfig = serde_json::from_str(&scene)
            .map_err(|e| Error::format(e.column() as u64, format!("{scene_file}: {e}")))?;
        let boxes = read_boxes(&dir.join(boxes_file), frames)?;
        let sub = dir.join(id);
        let mut samples = Vec::with_capacity(frames);
        for (t, truth) in boxes.into_iter().enumerate() {
            let rgb = utt1::load(&sub.join(frame_name("rgb", t)))?;
            let aux = if modality == Modality::Absent {
                None
            } else {
                Some(utt1::load(&sub.join(frame_name("aux", t)))?)
            };
            samples.push(ModalSample {
                rgb,
                aux,
                modality,
                truth,
            });
        }
        seqs.push(ModalSequence { samples, config });
    }
    if text.is_empty() {
        return Err(Error::format(0, "missing manifest header"));
    }
    match footer {
        Some((_, n)) if n == seqs.len() => Ok(seqs),
        Some((at, n)) => Err(Error::format(
            at,
            format!("footer lists {n} sequences, found {}", seqs.len()),
        )),
        None => Err(Error::format(offset, "manifest truncated before footer")),
    }
}

fn read_boxes(path: &Path, frames: usize) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::with_capacity(frames);
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len() as u64;
        if !line.ends_with('\n') {
            return Err(Error::format(here, "unterminated box line"));
        }
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(here, format!("box line: {e}")))?;
        let [t, cx, cy, w, h] = v[..] else {
            return Err(Error::format(here, "box line needs 5 values"));
        };
        if t as usize != out.len() {
            return Err(Error::format(here, format!("frame index {t} out of order")));
        }
        out.push(BBox { cx, cy, w, h });
    }
    if out.len() != frames {
        return Err(Error::format(
            offset,
            format!("{} boxes for {frames} frames", out.len()),
        ));
    }
    Ok(out)
}
