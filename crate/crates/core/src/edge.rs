//! Explicit edge awareness.
//!
//! Neighbor differences along x and y are taken from the RGB and auxiliary
//! frames, their magnitudes are average-pooled per patch, and the pooled maps
//! are projected and added onto the visual tokens to form the gradient
//! feature `G`.

use rand::Rng;

use crate::autodiff::params::join;
use crate::autodiff::{concat_cols, CustomOp, LinearLayer, Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// x/y neighbor differences of a `[C, H, W]` image.
///
/// The last column of `dx` and the last row of `dy` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair<S> {
    pub dx: Tensor<S>,
    pub dy: Tensor<S>,
}

fn chw(image: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *image.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => Err(Error::shape(format!("expected a [C,H,W] image, got {d:?}"))),
    }
}

pub fn gradient_map<S: Scalar>(image: &Tensor<S>) -> Result<GradientPair<S>> {
    let (c, h, w) = chw(image)?;
    if h < 2 || w < 2 {
        return Err(Error::Size(format!(
            "gradient map needs H, W >= 2, got {h}x{w}"
        )));
    }
    let x = image.data();
    let mut dx = vec![S::zero(); x.len()];
    let mut dy = vec![S::zero(); x.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let at = (ch * h + i) * w + j;
                if j + 1 < w {
                    dx[at] = x[at + 1] - x[at];
                }
                if i + 1 < h {
                    dy[at] = x[at + w] - x[at];
                }
            }
        }
    }
    Ok(GradientPair {
        dx: Tensor::new(image.dims(), dx, false)?,
        dy: Tensor::new(image.dims(), dy, false)?,
    })
}

/// ITU-R BT.601 luma of a 3-channel image, as `[1, H, W]`.
pub fn luminance<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = chw(image)?;
    if c != 3 {
        return Err(Error::shape(format!("luminance needs 3 channels, got {c}")));
    }
    let x = image.data();
    let plane = h * w;
    let coeff = [S::lit(0.299), S::lit(0.587), S::lit(0.114)];
    let out = (0..plane)
        .map(|p| coeff[0] * x[p] + coeff[1] * x[plane + p] + coeff[2] * x[2 * plane + p])
        .collect();
    Tensor::new(&[1, h, w], out, false)
}

/// Per-patch mean of `|dx| + |dy|` for every channel: `[C,H,W] -> [n, C]`.
struct EdgePool {
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
}

impl EdgePool {
    fn grid(&self) -> (usize, usize) {
        (self.h / self.patch, self.w / self.patch)
    }

    fn token(&self, i: usize, j: usize) -> usize {
        let (_, gw) = self.grid();
        (i / self.patch) * gw + j / self.patch
    }

    fn forward<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let (gh, gw) = self.grid();
        let (c, h, w) = (self.c, self.h, self.w);
        let norm = S::one() / S::lit((self.patch * self.patch) as f64);
        let mut out = vec![S::zero(); gh * gw * c];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let at = (ch * h + i) * w + j;
                    let mut m = S::zero();
                    if j + 1 < w {
                        m = m + (x[at + 1] - x[at]).abs();
                    }
                    if i + 1 < h {
                        m = m + (x[at + w] - x[at]).abs();
                    }
                    let o = self.token(i, j) * c + ch;
                    out[o] = out[o] + m * norm;
                }
            }
        }
        out
    }
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

impl<S: Scalar> CustomOp<S> for EdgePool {
    fn name(&self) -> &'static str {
        "edge_pool"
    }

    fn backward(&self, inputs: &[&[S]], _output: &[S], grad_out: &[S]) -> Vec<Vec<S>> {
        let x = inputs[0];
        let (c, h, w) = (self.c, self.h, self.w);
        let norm = S::one() / S::lit((self.patch * self.patch) as f64);
        let mut gx = vec![S::zero(); x.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let at = (ch * h + i) * w + j;
                    let g = grad_out[self.token(i, j) * c + ch] * norm;
                    if j + 1 < w {
                        let s = sign(x[at + 1] - x[at]) * g;
                        gx[at + 1] = gx[at + 1] + s;
                        gx[at] = gx[at] - s;
                    }
                    if i + 1 < h {
                        let s = sign(x[at + w] - x[at]) * g;
                        gx[at + w] = gx[at + w] + s;
                        gx[at] = gx[at] - s;
                    }
                }
            }
        }
        vec![gx]
    }
}

/// Pools edge magnitudes of a `[C, H, W]` image var into `[n, C]` tokens.
pub fn edge_pool<'t, S: Scalar>(image: Var<'t, S>, patch: usize) -> Result<Var<'t, S>> {
    let (c, h, w) = match image.dims()[..] {
        [c, h, w] => (c, h, w),
        ref d => return Err(Error::shape(format!("expected a [C,H,W] image, got {d:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(Error::Size(format!(
            "gradient map needs H, W >= 2, got {h}x{w}"
        )));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Size(format!(
            "{h}x{w} image is not tiled by patch {patch}"
        )));
    }
    let op = EdgePool { c, h, w, patch };
    let (gh, gw) = op.grid();
    let value = op.forward(&image.value_rc());
    image
        .tape()
        .custom(&[image], &[gh * gw, c], value, Box::new(op))
}

/// Learned part of the gradient feature: the projection of pooled edge
/// maps back to token width.
#[derive(Debug, Clone)]
pub struct GradientFeatureBuilder<S> {
    pub proj: LinearLayer<S>,
    pub patch: usize,
    /// Compute RGB differences on luma instead of per channel.
    pub rgb_luminance: bool,
    pub aux_channels: usize,
}

impl<S: Scalar> GradientFeatureBuilder<S> {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        patch: usize,
        rgb_luminance: bool,
        aux_channels: usize,
        rng: &mut R,
    ) -> Self {
        let rgb_channels = if rgb_luminance { 1 } else { 3 };
        Self {
            proj: LinearLayer::new(rgb_channels + aux_channels, width, true, rng),
            patch,
            rgb_luminance,
            aux_channels,
        }
    }

    pub fn build<'t>(
        &self,
        tape: &'t Tape<S>,
        rgb: Var<'t, S>,
        aux: Option<Var<'t, S>>,
        visual_feat: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let rgb = if self.rgb_luminance {
            tape.constant(&luminance(&rgb.to_tensor())?)
        } else {
            rgb
        };
        build_gradient_feature(
            tape,
            rgb,
            aux,
            self.aux_channels,
            visual_feat,
            &self.proj,
            self.patch,
        )
    }
}

impl<S: Scalar> Parameters<S> for GradientFeatureBuilder<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `G = visual_feat + proj([pool(rgb), pool(aux)])`.
///
/// An absent auxiliary frame contributes `aux_channels` zero columns, which
/// is exactly what an all-zero frame would produce.
pub fn build_gradient_feature<'t, S: Scalar>(
    tape: &'t Tape<S>,
    rgb: Var<'t, S>,
    aux: Option<Var<'t, S>>,
    aux_channels: usize,
    visual_feat: Var<'t, S>,
    proj: &LinearLayer<S>,
    patch: usize,
) -> Result<Var<'t, S>> {
    let pooled_rgb = edge_pool(rgb, patch)?;
    let n = pooled_rgb.rows();
    if visual_feat.dims().len() != 2 || visual_feat.rows() != n {
        return Err(Error::shape(format!(
            "visual feature {:?} does not match a {n}-token grid",
            visual_feat.dims()
        )));
    }
    let pooled_aux = match aux {
        Some(a) => {
            if a.dims()[1..] != rgb.dims()[1..] {
                return Err(Error::shape(format!(
                    "auxiliary frame {:?} vs rgb {:?}",
                    a.dims(),
                    rgb.dims()
                )));
            }
            edge_pool(a, patch)?
        }
        None => tape.zeros(&[n, aux_channels]),
    };
    let pooled = concat_cols(&[pooled_rgb, pooled_aux])?;
    proj.forward(tape, pooled)?.add(visual_feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(&[c, h, w], v).unwrap()
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let g = gradient_map(&Tensor::<f64>::full(&[3, 4, 5], 5.0)).unwrap();
        assert!(g.dx.data().iter().all(|&v| v == 0.0));
        assert!(g.dy.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.dx.dims(), &[3, 4, 5]);
    }

    #[test]
    fn two_by_two_example() {
        let g = gradient_map(&img(1, 2, 2, &[0.0, 1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.dx.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.dy.data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn tiny_image_is_rejected() {
        assert!(matches!(
            gradient_map(&img(1, 1, 1, &[1.0])),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn offset_invariance_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 5, 6], 1.0, &mut rng);
        let y = Tensor::<f64>::uniform(&[2, 5, 6], 1.0, &mut rng);
        let shifted = Tensor::from_f64(
            &[2, 5, 6],
            &x.data().iter().map(|v| v + 0.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let gx = gradient_map(&x).unwrap();
        let gs = gradient_map(&shifted).unwrap();
        assert!(gx.dx.max_abs_diff(&gs.dx) < 1e-12);
        assert!(gx.dy.max_abs_diff(&gs.dy) < 1e-12);

        let (a, b) = (2.0, -0.75);
        let combo: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let gc = gradient_map(&Tensor::<f64>::from_f64(&[2, 5, 6], &combo).unwrap()).unwrap();
        let gy = gradient_map(&y).unwrap();
        for i in 0..combo.len() {
            let want = a * gx.dx.data()[i] + b * gy.dx.data()[i];
            assert!((gc.dx.data()[i] - want).abs() < 1e-12);
            let want = a * gx.dy.data()[i] + b * gy.dy.data()[i];
            assert!((gc.dy.data()[i] - want).abs() < 1e-12);
        }
    }

    /// Straight-line pool → concat → project → add, written with plain loops.
    fn reference_feature(
        rgb: &Tensor<f64>,
        aux: &Tensor<f64>,
        visual: &Tensor<f64>,
        proj: &LinearLayer<f64>,
        p: usize,
    ) -> Vec<f64> {
        let (_, h, w) = (rgb.dims()[0], rgb.dims()[1], rgb.dims()[2]);
        let gw = w / p;
        let n = (h / p) * gw;
        let c = visual.cols();
        let mut out = visual.data().to_vec();
        for t in 0..n {
            let (ti, tj) = (t / gw, t % gw);
            let mut pooled = Vec::new();
            for image in [rgb, aux] {
                for ch in 0..image.dims()[0] {
                    let mut acc = 0.0;
                    for i in ti * p..(ti + 1) * p {
                        for j in tj * p..(tj + 1) * p {
                            let here = image.at3(ch, i, j);
                            if j + 1 < w {
                                acc += (image.at3(ch, i, j + 1) - here).abs();
                            }
                            if i + 1 < h {
                                acc += (image.at3(ch, i + 1, j) - here).abs();
                            }
                        }
                    }
                    pooled.push(acc / (p * p) as f64);
                }
            }
            for o in 0..c {
                let mut v = proj.bias.as_ref().unwrap().data()[o];
                for (k, pk) in pooled.iter().enumerate() {
                    v += proj.weight.at2(o, k) * pk;
                }
                out[t * c + o] += v;
            }
        }
        out
    }

    #[test]
    fn matches_scalar_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rgb = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
        let aux = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
        let visual = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
        let builder = GradientFeatureBuilder::<f64>::new(5, 4, false, 3, &mut rng);
        let tape = Tape::new();
        let g = builder
            .build(
                &tape,
                tape.constant(&rgb),
                Some(tape.constant(&aux)),
                tape.constant(&visual),
            )
            .unwrap();
        let want = reference_feature(&rgb, &aux, &visual, &builder.proj, 4);
        for (a, b) in g.value().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_frames_give_bias_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let builder = GradientFeatureBuilder::<f64>::new(6, 4, false, 3, &mut rng);
        let visual = Tensor::<f64>::uniform(&[4, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let g = builder
            .build(
                &tape,
                tape.constant(&Tensor::full(&[3, 8, 8], 0.3)),
                Some(tape.constant(&Tensor::full(&[3, 8, 8], 0.9))),
                tape.constant(&visual),
            )
            .unwrap()
            .value();
        let bias = builder.proj.bias.as_ref().unwrap().data();
        for t in 0..4 {
            for o in 0..6 {
                assert_eq!(g[t * 6 + o], visual.at2(t, o) + bias[o]);
            }
        }
    }

    #[test]
    fn absent_aux_equals_zero_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let builder = GradientFeatureBuilder::<f64>::new(6, 4, false, 3, &mut rng);
        let rgb = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
        let visual = Tensor::<f64>::uniform(&[4, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let absent = builder
            .build(&tape, tape.constant(&rgb), None, tape.constant(&visual))
            .unwrap();
        let zero = builder
            .build(
                &tape,
                tape.constant(&rgb),
                Some(tape.zeros(&[3, 8, 8])),
                tape.constant(&visual),
            )
            .unwrap();
        assert_eq!(absent.value(), zero.value());
    }

    #[test]
    fn token_grid_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let builder = GradientFeatureBuilder::<f64>::new(6, 4, false, 3, &mut rng);
        let tape = Tape::new();
        let r = builder.build(&tape, tape.zeros(&[3, 8, 8]), None, tape.zeros(&[5, 6]));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn luminance_switch_changes_projection_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let builder = GradientFeatureBuilder::<f64>::new(6, 4, true, 3, &mut rng);
        assert_eq!(builder.proj.in_features(), 4);
        let tape = Tape::new();
        let rgb = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
        let g = builder
            .build(&tape, tape.constant(&rgb), None, tape.zeros(&[4, 6]))
            .unwrap();
        assert_eq!(g.dims(), vec![4, 6]);
    }

    #[test]
    fn gradient_feature_passes_grad_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut builder = GradientFeatureBuilder::<f64>::new(5, 4, false, 3, &mut rng);
            let rgb = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
            let aux = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng);
            let visual = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
            let weights = Tensor::<f64>::uniform(&[4, 5], 1.0, &mut rng);
            // w.r.t. the rgb frame
            let err = grad_check(
                |tape, x| {
                    let g = builder.build(
                        tape,
                        x,
                        Some(tape.constant(&aux)),
                        tape.constant(&visual),
                    )?;
                    Ok(g.mul(tape.constant(&weights))?.sum())
                },
                &rgb,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rgb {err}");
            // w.r.t. the projection weights and the visual feature
            let err = crate::autodiff::grad_check_params(
                &mut builder,
                |tape, b| {
                    let v = tape.param(&visual.clone().with_requires_grad(true));
                    let g = b.build(tape, tape.constant(&rgb), Some(tape.constant(&aux)), v)?;
                    Ok(g.mul(tape.constant(&weights))?.sum())
                },
                1e-5,
                None,
                &mut rng,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: params {err}");
        }
    }
}
