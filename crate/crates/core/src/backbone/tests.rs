use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_params;
use crate::lora::trainable_params;
use crate::test_util::*;

fn model(cfg: TrackerConfig, seed: u64) -> UnTrack<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    UnTrack::new(cfg, &mut rng).unwrap()
}

fn frames(cfg: &TrackerConfig, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (t, s) = (cfg.template_size, cfg.image_size);
    (
        Tensor::uniform(&[3, t, t], 1.0, rng),
        Tensor::uniform(&[3, s, s], 1.0, rng),
        Tensor::uniform(&[3, s, s], 1.0, rng),
    )
}

fn run(
    m: &UnTrack<f64>,
    t: &Tensor<f64>,
    s: &Tensor<f64>,
    aux: Option<AuxInput<'_, f64>>,
) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let out = m.forward(&tape, t, s, aux).unwrap();
    (out.scores.value(), out.boxes.value())
}

#[test]
fn patch_count_for_default_frame() {
    let f = Tensor::<f64>::zeros(&[3, 64, 64]);
    let p = patchify(&f, 8).unwrap();
    assert_eq!(p.dims(), &[64, 192]);
    assert!(matches!(
        patchify(&Tensor::<f64>::zeros(&[3, 20, 16]), 8),
        Err(Error::Size(_))
    ));
}

#[test]
fn patchify_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (c, h, w, p) = (3, 16, 24, 4);
    let f = Tensor::<f64>::uniform(&[c, h, w], 1.0, &mut rng);
    let got = patchify(&f, p).unwrap();
    let gw = w / p;
    for token in 0..(h / p) * gw {
        let (py, px) = (token / gw, token % gw);
        for col in 0..c * p * p {
            let (ch, rem) = (col / (p * p), col % (p * p));
            let (dy, dx) = (rem / p, rem % p);
            assert_eq!(got.at2(token, col), f.at3(ch, py * p + dy, px * p + dx));
        }
    }
}

#[test]
fn zero_frame_embeds_to_bias_rows() {
    let mut m = model(TrackerConfig::miniature(), 1);
    m.pos_search.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let tape = Tape::new();
    let z = m
        .embed(&tape, &Tensor::zeros(&[3, 16, 16]), &m.pos_search)
        .unwrap()
        .value();
    let bias = m.patch_embed.bias.as_ref().unwrap().data().to_vec();
    assert_eq!(z, bias.repeat(4));
}

#[test]
fn config_validation() {
    let ok = TrackerConfig::default();
    assert!(ok.validate().is_ok());
    assert_eq!(ok.search_tokens(), 64);
    assert_eq!(ok.template_tokens(), 16);
    for bad in [
        TrackerConfig {
            image_size: 60,
            ..ok.clone()
        },
        TrackerConfig {
            heads: 5,
            ..ok.clone()
        },
        TrackerConfig {
            prompt_layers: vec![7],
            ..ok.clone()
        },
        TrackerConfig {
            percentile: 0.75,
            ..ok.clone()
        },
        TrackerConfig {
            rank_l: 48,
            ..ok.clone()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn box_geometry() {
    let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
    assert_eq!(a.iou(&a), 1.0);
    assert!((a.giou(&a) - 1.0).abs() < 1e-15);
    let b = BBox::new(0.6, 0.5, 0.2, 0.2).unwrap();
    // Overlap 0.1×0.2 over union 0.08 − 0.02.
    assert!((a.iou(&b) - 0.02 / 0.06).abs() < 1e-12);
    let far = BBox::new(0.9, 0.9, 0.1, 0.1).unwrap();
    // Hull [0.4, 0.95]², union 0.05.
    let hull = 0.55 * 0.55;
    assert!((a.giou(&far) - (0.0 - (hull - 0.05) / hull)).abs() < 1e-12);
    assert!(a.giou(&far) < 0.0);
    assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
    assert!((a.center_error(&b, 64) - 6.4).abs() < 1e-12);
}

#[test]
fn predict_bbox_selection() {
    let boxes: Vec<f64> = (0..16).map(|i| 0.05 + i as f64 * 0.05).collect();
    let (b, conf) = predict_bbox(&[0.0, 0.0, 3.0, 0.0], &boxes).unwrap();
    assert_eq!(
        (b.cx, b.cy, b.w, b.h),
        (boxes[8], boxes[9], boxes[10], boxes[11])
    );
    assert!((conf - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
    let (b, _) = predict_bbox(&[1.0; 4], &boxes).unwrap();
    assert_eq!(b.cx, boxes[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let bx: Vec<f64> = (0..36).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut best = 0;
        for i in 1..9 {
            if s[i] > s[best] {
                best = i;
            }
        }
        let (b, c) = predict_bbox(&s, &bx).unwrap();
        assert_eq!(b.cx, bx[4 * best]);
        assert_eq!(c, 1.0 / (1.0 + (-s[best]).exp()));
    }
    assert!(predict_bbox::<f64>(&[0.0; 2], &[0.0; 4]).is_err());
}

#[test]
fn forward_shapes_and_box_range() {
    let cfg = TrackerConfig::miniature();
    let m = model(cfg.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, s, a) = frames(&cfg, &mut rng);
    let (scores, boxes) = run(
        &m,
        &t,
        &s,
        Some(AuxInput {
            frame: &a,
            modality: Modality::Thermal,
        }),
    );
    assert_eq!(scores.len(), 4);
    assert_eq!(boxes.len(), 16);
    for (i, b) in boxes.chunks(4).enumerate() {
        let (col, row) = ((i % 2) as f64, (i / 2) as f64);
        assert!(b[0] > col / 2.0 && b[0] < (col + 1.0) / 2.0);
        assert!(b[1] > row / 2.0 && b[1] < (row + 1.0) / 2.0);
        assert!(b[2] > 0.0 && b[2] < 1.0 && b[3] > 0.0 && b[3] < 1.0);
    }
    assert_eq!(m.token_at(0.75, 0.25), 1);
    assert_eq!(m.token_at(1.0, 1.0), 3);
}

#[test]
fn forward_is_deterministic_and_absent_is_finite() {
    let cfg = TrackerConfig::default();
    let m1 = model(cfg.clone(), 5);
    let m2 = model(cfg.clone(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, s, a) = frames(&cfg, &mut rng);
    let aux = Some(AuxInput {
        frame: &a,
        modality: Modality::Depth,
    });
    assert_eq!(run(&m1, &t, &s, aux), run(&m2, &t, &s, aux));
    let zero = Tensor::zeros(&[3, 64, 64]);
    let (sc, bx) = run(
        &m1,
        &t,
        &s,
        Some(AuxInput {
            frame: &zero,
            modality: Modality::Absent,
        }),
    );
    assert!(sc.iter().chain(&bx).all(|v| v.is_finite()));
}

#[test]
fn prompting_off_with_fresh_adapters_is_frozen_baseline() {
    let mut cfg = TrackerConfig::miniature();
    cfg.switches.prompt = false;
    let base = model(cfg.clone(), 7);
    let mut wrapped = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    wrapped.prepare_finetune(&mut rng).unwrap();
    assert!(wrapped.is_wrapped());
    for _ in 0..10 {
        let (t, s, a) = frames(&cfg, &mut rng);
        let aux = Some(AuxInput {
            frame: &a,
            modality: Modality::Event,
        });
        let (s0, b0) = run(&base, &t, &s, None);
        let (s1, b1) = run(&wrapped, &t, &s, aux);
        assert_close(&s0, &s1, 1e-12);
        assert_close(&b0, &b1, 1e-12);
    }
}

#[test]
fn auxiliary_input_changes_prediction() {
    let cfg = TrackerConfig::miniature();
    let m = model(cfg.clone(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, s, a) = frames(&cfg, &mut rng);
    let plain = run(&m, &t, &s, None);
    let fused = run(
        &m,
        &t,
        &s,
        Some(AuxInput {
            frame: &a,
            modality: Modality::Thermal,
        }),
    );
    assert_ne!(plain.0, fused.0);
}

#[test]
fn mismatched_frames_are_config_errors() {
    let cfg = TrackerConfig::miniature();
    let m = model(cfg.clone(), 11);
    let tape = Tape::new();
    let t = Tensor::zeros(&[3, 8, 8]);
    let e = m.forward(&tape, &t, &Tensor::zeros(&[3, 24, 24]), None);
    assert!(matches!(e, Err(Error::Config(_))));
    let aux = Tensor::zeros(&[3, 8, 8]);
    let e = m.forward(
        &tape,
        &t,
        &Tensor::zeros(&[3, 16, 16]),
        Some(AuxInput {
            frame: &aux,
            modality: Modality::Depth,
        }),
    );
    assert!(matches!(e, Err(Error::Config(_))));
}

#[test]
fn finetune_freezes_backbone_and_default_overhead_is_small() {
    let mut m = model(TrackerConfig::default(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    m.prepare_finetune(&mut rng).unwrap();
    for (name, t) in m.named_params() {
        let adapter = name.contains("lora_");
        let fusion =
            name.starts_with("edge.") || name.starts_with("shared.") || name.starts_with("prompt.");
        assert_eq!(t.requires_grad(), adapter || fusion, "{name}");
    }
    let (trainable, total, ratio) = trainable_params(&m);
    assert!(
        trainable > 0 && ratio <= 0.10,
        "{trainable}/{total} = {ratio}"
    );
}

#[test]
fn miniature_passes_grad_check_on_ten_seeds() {
    for seed in 0..10u64 {
        let cfg = TrackerConfig::miniature();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut m = UnTrack::<f64>::new(cfg.clone(), &mut rng).unwrap();
        if seed % 2 == 1 {
            m.prepare_finetune(&mut rng).unwrap();
            for b in &mut m.blocks {
                for p in b.attn.projections_mut() {
                    if let Projection::Lora(l) = p {
                        l.b = Tensor::uniform(l.b.dims(), 0.5, &mut rng).with_requires_grad(true);
                    }
                }
            }
        }
        let (t, s, a) = frames(&cfg, &mut rng);
        let modality = Modality::AUXILIARY[seed as usize % 3];
        let ws = Tensor::uniform(&[4, 1], 1.0, &mut rng);
        let wb = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let err = grad_check_params(
            &mut m,
            |tape, m| {
                let out = m.forward(
                    tape,
                    &t,
                    &s,
                    Some(AuxInput {
                        frame: &a,
                        modality,
                    }),
                )?;
                out.scores
                    .mul(tape.constant(&ws))?
                    .sum()
                    .add(out.boxes.mul(tape.constant(&wb))?.sum())
            },
            1e-5,
            Some(400),
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
