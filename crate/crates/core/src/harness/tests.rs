use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::*;
use super::loss::*;
use super::metrics::*;
use super::train::*;
use super::*;
use crate::autodiff::{grad_check, grad_check_params, Tape, Tensor};
use crate::backbone::{AuxInput, BBox};
use crate::modality::Modality;
use crate::synth::{generate_sequence, SceneConfig};

fn bbox(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h).unwrap()
}

fn tiny_scene(m: Modality, seed: u64, frames: usize) -> crate::synth::ModalSequence {
    let cfg = SceneConfig {
        frames,
        image_size: 16,
        size_range: (3.0, 5.0),
        ..SceneConfig::new(m, seed)
    };
    generate_sequence(&cfg).unwrap()
}

fn mini_model(seed: u64) -> UnTrack<f64> {
    finetune_model(&TrackerConfig::miniature(), None, seed).unwrap()
}

#[test]
fn giou_examples() {
    let a = bbox(0.5, 0.5, 0.2, 0.3);
    assert_eq!(a.giou(&a), 1.0);
    let (p, q) = (bbox(0.2, 0.2, 0.1, 0.1), bbox(0.8, 0.8, 0.1, 0.1));
    let want = -(0.49 - 0.02) / 0.49;
    assert!((p.giou(&q) - want).abs() < 1e-12);
    let tape = Tape::<f64>::new();
    let v = tape
        .constant_from(&[1, 4], vec![0.2, 0.2, 0.1, 0.1])
        .unwrap();
    assert!((giou(v, &q).unwrap().scalar() - want).abs() < 1e-12);
}

#[test]
fn tape_giou_matches_box_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let mut r = || {
            bbox(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            )
        };
        let (a, b) = (r(), r());
        let tape = Tape::<f64>::new();
        let v = tape
            .constant_from(&[1, 4], vec![a.cx, a.cy, a.w, a.h])
            .unwrap();
        assert!((giou(v, &b).unwrap().scalar() - a.giou(&b)).abs() < 1e-12);
    }
}

#[test]
fn perfect_prediction_zeroes_box_terms() {
    let truth = bbox(0.3, 0.6, 0.25, 0.2);
    let tape = Tape::<f64>::new();
    let mut scores = vec![-30.0; 4];
    scores[2] = 30.0;
    let mut boxes = vec![0.5; 16];
    boxes[8..12].copy_from_slice(&[truth.cx, truth.cy, truth.w, truth.h]);
    let out = crate::backbone::TrackOutput {
        scores: tape.constant_from(&[4, 1], scores).unwrap(),
        boxes: tape.constant_from(&[4, 4], boxes).unwrap(),
    };
    let (_, parts) = tracking_loss(&out, &truth, 2, &LossWeights::default()).unwrap();
    assert_eq!(parts.l1, 0.0);
    assert_eq!(parts.giou, 1.0);
    assert!(parts.focal < 1e-20);
    let degenerate = BBox { w: 0.0, ..truth };
    assert!(matches!(
        tracking_loss(&out, &degenerate, 2, &LossWeights::default()),
        Err(Error::Domain(_))
    ));
}

#[test]
fn focal_matches_closed_form_and_gradient() {
    let z = [0.3, -1.2, 2.0, 0.0];
    let tape = Tape::<f64>::new();
    let v = tape.constant_from(&[4, 1], z.to_vec()).unwrap();
    let got = focal_loss(v, 2, 2.0).unwrap().scalar();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let want: f64 = z
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = sig(x);
            if i == 2 {
                -(1.0 - p).powi(2) * p.ln()
            } else {
                -p.powi(2) * (1.0 - p).ln()
            }
        })
        .sum();
    assert!((got - want).abs() < 1e-14);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let x = Tensor::<f64>::uniform(&[9, 1], 4.0, &mut rng);
        let err = grad_check(|_, v| focal_loss(v, seed % 9, 2.0), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn full_loss_passes_grad_check_on_miniature() {
    for seed in 0..10u64 {
        let mut m = mini_model(500 + seed);
        let seq = tiny_scene(Modality::AUXILIARY[seed as usize % 3], seed, 3);
        let p = PreparedSequence::<f64>::new(&seq, 8, false).unwrap();
        let truth = p.truth[1];
        let pos = m.token_at(truth.cx, truth.cy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = grad_check_params(
            &mut m,
            |tape, m| {
                let out = m.forward(tape, &p.template, &p.rgb[1], Some(p.aux_input(1)))?;
                Ok(tracking_loss(&out, &truth, pos, &LossWeights::default())?.0)
            },
            1e-5,
            Some(300),
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn f_score_examples() {
    assert!((f_score(0.4, 0.4) - 0.4).abs() < 1e-15);
    assert_eq!(f_score(0.0, 0.0), 0.0);
    let f = f_score(0.613, 0.610);
    assert!((f - 0.611_496_32).abs() < 1e-8);
    assert_eq!(format!("{f:.4}"), "0.6115");
}

/// Success curve by explicit threshold loop.
fn sr_brute(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..=20 {
        let t = i as f64 / 20.0;
        let hits = ious.iter().filter(|&&v| v >= t).count();
        total += hits as f64 / ious.len() as f64;
    }
    total / 21.0
}

#[test]
fn success_rate_matches_hand_integration() {
    let ious = [1.0, 0.5, 0.0];
    assert!((success_auc(&ious) - 11.0 / 21.0).abs() < 1e-15);
    assert!((success_auc(&ious) - sr_brute(&ious)).abs() < 1e-15);
}

#[test]
fn success_rate_is_monotone_in_iou() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let mut ious: Vec<f64> = (0..7).map(|_| rng.gen()).collect();
        let before = success_auc(&ious);
        let i = rng.gen_range(0..7);
        ious[i] = rng.gen_range(ious[i]..=1.0);
        assert!(success_auc(&ious) >= before);
    }
}

#[test]
fn long_term_f_matches_threshold_sweep() {
    let ious = [0.9, 0.2, 0.7, 0.0, 0.6];
    let conf = [0.95, 0.3, 0.8, 0.1, 0.5];
    let (pc, rc) = long_term_curves(&ious, &conf);
    let mut best = 0.0f64;
    for k in 0..=50 {
        let tau = k as f64 / 50.0;
        let kept: Vec<usize> = (0..5).filter(|&i| conf[i] >= tau).collect();
        let s: f64 = kept.iter().map(|&i| ious[i]).sum();
        let pr = if kept.is_empty() {
            0.0
        } else {
            s / kept.len() as f64
        };
        let re = s / 5.0;
        assert!((pc[k] - pr).abs() < 1e-15 && (rc[k] - re).abs() < 1e-15);
        best = best.max(if pr + re > 0.0 {
            2.0 * pr * re / (pr + re)
        } else {
            0.0
        });
    }
    assert_eq!(best_f(&pc, &rc).0, best);
}

#[test]
fn oracle_scores_perfectly_and_static_box_does_not() {
    let seqs: Vec<_> = (0..3)
        .map(|i| tiny_scene(Modality::AUXILIARY[i], 10 + i as u64, 6))
        .collect();
    let r = evaluate(&OraclePredictor, &seqs, false, &RunMeta::default()).unwrap();
    assert_eq!(
        (r.aggregate.pr, r.aggregate.sr, r.aggregate.f_score),
        (1.0, 1.0, 1.0)
    );
    let r = evaluate(&StaticPredictor, &seqs, false, &RunMeta::default()).unwrap();
    assert!(r.aggregate.sr < 1.0);
    assert_eq!(r.per_modality.len(), 3);
}

#[test]
fn crop_template_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Tensor::<f64>::uniform(&[3, 16, 16], 1.0, &mut rng);
    let c = crop_template(&f, &bbox(0.5, 0.25, 0.2, 0.2), 8).unwrap();
    for ch in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(c.at3(ch, y, x), f.at3(ch, y, 4 + x));
            }
        }
    }
    let edge = crop_template(&f, &bbox(0.98, 0.02, 0.02, 0.02), 8).unwrap();
    assert_eq!(edge.at3(0, 0, 0), f.at3(0, 0, 8));
}

#[test]
fn zero_steps_leave_model_unchanged_and_training_freezes_backbone() {
    let seqs: Vec<_> = (0..3)
        .map(|i| tiny_scene(Modality::AUXILIARY[i], 20 + i as u64, 4))
        .collect();
    let mut m = mini_model(4);
    let init = m.clone();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    train(&mut m, &seqs, &cfg).unwrap();
    assert_eq!(m.named_params(), init.named_params());

    let cfg = TrainConfig {
        steps: 6,
        batch: 2,
        ..TrainConfig::default()
    };
    let rep = train(&mut m, &seqs, &cfg).unwrap();
    assert_eq!(rep.curve.len(), 6);
    let mut changed = 0;
    for ((name, a), (_, b)) in m.named_params().into_iter().zip(init.named_params()) {
        if a.requires_grad() {
            changed += usize::from(a.data() != b.data());
        } else {
            assert_eq!(a.data(), b.data(), "{name}");
        }
    }
    assert!(changed > 0);
}

#[test]
fn training_is_reproducible() {
    let seqs: Vec<_> = (0..3)
        .map(|i| tiny_scene(Modality::AUXILIARY[i], 30 + i as u64, 4))
        .collect();
    let cfg = TrainConfig {
        steps: 5,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (mini_model(5), mini_model(5));
    assert_eq!(
        train(&mut a, &seqs, &cfg).unwrap(),
        train(&mut b, &seqs, &cfg).unwrap()
    );
    assert_eq!(a.named_params(), b.named_params());
}

#[test]
fn non_finite_state_aborts_with_diagnostics() {
    let seqs = vec![tiny_scene(Modality::Depth, 40, 3)];
    let mut m = mini_model(6);
    m.prompts[0].big_phi_p.weight.data_mut()[0] = f64::NAN;
    let e = train(
        &mut m,
        &seqs,
        &TrainConfig {
            steps: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap_err();
    match e {
        Error::Numeric(msg) => assert!(
            msg.contains("step 0") && msg.contains("grad norms"),
            "{msg}"
        ),
        other => panic!("{other:?}"),
    }
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let mut t = Tensor::<f64>::new(&[3], vec![2.0, -1.0, 0.5], true).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        weight_decay: 0.0,
        grad_clip: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new();
    for _ in 0..400 {
        t.zero_grad();
        let tape = Tape::new();
        let x = tape.param(&t);
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        g.accumulate_into(&mut t).unwrap();
        opt.step(&mut t, &cfg);
    }
    assert!(t.data().iter().all(|v| v.abs() < 1e-2), "{:?}", t.data());
}

#[test]
fn evaluation_is_deterministic_and_dummy_mode_runs() {
    let seqs: Vec<_> = (0..3)
        .map(|i| tiny_scene(Modality::AUXILIARY[i], 50 + i as u64, 4))
        .collect();
    let m = mini_model(7);
    let meta = RunMeta {
        config_hash: config_hash(&m.config),
        seed: 7,
    };
    let a = evaluate_model(&m, &seqs, false, &meta).unwrap();
    let b = evaluate_model(&m, &seqs, false, &meta).unwrap();
    assert_eq!(a.deterministic_json(), b.deterministic_json());
    let d = evaluate_model(&m, &seqs, true, &meta).unwrap();
    assert!(d.dummy_mode && d.aggregate.mean_iou.is_finite());
    assert!(a.deterministic_json().contains("\"timestamp\": null"));
}

#[test]
fn dummy_mode_equals_explicit_zero_absent_input() {
    let seq = tiny_scene(Modality::Thermal, 60, 3);
    let m = mini_model(8);
    let dummy = ModelPredictor { model: &m }.track(&seq, true).unwrap();
    let p = PreparedSequence::<f64>::new(&seq, 8, false).unwrap();
    let zero = Tensor::zeros(&[3, 16, 16]);
    let tape = Tape::new();
    let o = m
        .forward(
            &tape,
            &p.template,
            &p.rgb[1],
            Some(AuxInput {
                frame: &zero,
                modality: Modality::Absent,
            }),
        )
        .unwrap();
    let want = crate::backbone::predict_bbox(&o.scores.value(), &o.boxes.value()).unwrap();
    assert_eq!(dummy[0], want);
}

#[test]
fn mismatched_sequence_is_config_error() {
    let seq = generate_sequence(&SceneConfig::new(Modality::Depth, 1)).unwrap();
    let m = mini_model(9);
    let e = evaluate_model(&m, &[seq], false, &RunMeta::default());
    assert!(matches!(e, Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = mini_model(10);
    m.prompts[1].rgb.sigma_c.weight.data_mut()[3] = 0.123456789;
    save_checkpoint(&m, dir.path()).unwrap();
    let back: UnTrack<f64> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.named_params(), m.named_params());
    for ((_, a), (_, b)) in back.named_params().into_iter().zip(m.named_params()) {
        assert_eq!(a.requires_grad(), b.requires_grad());
    }
    let f = dir.path().join("blocks.0.attn.q.lora_b.utt1");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path()),
        Err(Error::Format { .. })
    ));
}

#[test]
fn backbone_copy_shares_pretrained_weights() {
    let cfg = TrackerConfig::miniature();
    let src = finetune_model::<f64>(&cfg, None, 11).unwrap();
    let other = TrackerConfig {
        rank_k: 3,
        ..cfg.clone()
    };
    let dst = finetune_model(&other, Some(&src), 99).unwrap();
    for ((n, a), (_, b)) in src.named_params().into_iter().zip(dst.named_params()) {
        if is_backbone_tensor(&n) {
            assert_eq!(a.data(), b.data(), "{n}");
        }
    }
}

#[test]
fn ablation_axis_values() {
    let base = TrackerConfig::default();
    for axis in AblationAxis::ALL {
        let vals = axis.reference_values();
        let cfgs: Vec<_> = vals
            .iter()
            .map(|v| ablation::apply_axis(&base, axis, v).unwrap())
            .collect();
        for i in 0..cfgs.len() {
            for j in 0..i {
                assert_ne!(cfgs[i], cfgs[j]);
            }
        }
    }
    let e = ablation::apply_axis(&base, AblationAxis::RankK, "48");
    assert!(matches!(e, Err(Error::Config(_))));
    assert!(matches!(
        "w/o magic".parse::<Component>(),
        Err(Error::Config(_))
    ));
    assert_eq!("no-explicit-edge".parse::<Component>().is_err(), true);
    assert_eq!(
        "w/o explicit edge".parse::<Component>().unwrap(),
        Component::NoExplicitEdge
    );
    assert_eq!(ablation::parse_fraction("1/3").unwrap(), 1.0 / 3.0);
    let empty = ablation_grid(
        &base,
        AblationAxis::RankK,
        &[],
        &TrainConfig::default(),
        None,
        &[],
        &[],
    );
    assert!(matches!(empty, Err(Error::Config(_))));
}
