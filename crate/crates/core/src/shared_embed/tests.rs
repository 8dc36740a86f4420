use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_params;
use crate::test_util::*;

fn block(c: usize, k: usize, seed: u64) -> SharedEmbedBlock<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SharedEmbedBlock::new(SharedEmbedConfig::new(c, k), &mut rng).unwrap()
}

fn zero_all_biases(b: &mut SharedEmbedBlock<f64>) {
    b.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    });
}

fn rand_t(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(dims, 1.0, rng)
}

#[test]
fn in_domain_output_has_rank_width() {
    let b = block(32, 4, 0);
    let tape = Tape::new();
    for m in Modality::AUXILIARY {
        let y = b
            .in_domain_lowrank(&tape, tape.zeros(&[6, 32]), Branch::Modality(m))
            .unwrap();
        assert_eq!(y.dims(), vec![6, 4]);
    }
    let y = b
        .in_domain_lowrank(&tape, tape.zeros(&[6, 32]), Branch::Gradient)
        .unwrap();
    assert_eq!(y.dims(), vec![6, 4]);
}

#[test]
fn in_domain_zero_input_zero_bias_is_zero() {
    let mut b = block(32, 4, 1);
    zero_all_biases(&mut b);
    let tape = Tape::new();
    let y = b
        .in_domain_lowrank(
            &tape,
            tape.zeros(&[3, 32]),
            Branch::Modality(Modality::Thermal),
        )
        .unwrap();
    assert!(y.value().iter().all(|&v| v == 0.0));
}

#[test]
fn in_domain_matches_matrix_product_and_routes_by_tag() {
    let b = block(16, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_t(&[5, 16], &mut rng);
    let tape = Tape::new();
    for (m, sigma) in [
        (Modality::Depth, &b.sigma_d),
        (Modality::Thermal, &b.sigma_t),
        (Modality::Event, &b.sigma_e),
    ] {
        let y = b
            .in_domain_lowrank(&tape, tape.constant(&x), Branch::Modality(m))
            .unwrap();
        assert_close(
            &y.value(),
            &linear_ref(&sigma.layers[0], x.data(), 5),
            1e-12,
        );
    }
}

#[test]
fn absent_tag_has_no_approximator() {
    let b = block(16, 4, 2);
    let tape = Tape::new();
    let r = b.in_domain_lowrank(
        &tape,
        tape.zeros(&[2, 16]),
        Branch::Modality(Modality::Absent),
    );
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn rank_must_be_below_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        SharedEmbedBlock::<f64>::new(SharedEmbedConfig::new(8, 8), &mut rng),
        Err(Error::Rank(_))
    ));
    assert!(matches!(
        LowRankProjector::<f64>::new(8, 8, &mut rng),
        Err(Error::Rank(_))
    ));
    let p = LowRankProjector::<f64>::new(8, 3, &mut rng).unwrap();
    assert_eq!((p.down.out_features(), p.up.out_features()), (3, 8));
}

#[test]
fn fuse_examples() {
    let mut b = block(16, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let tape = Tape::new();
    let n = 5;
    let (dk, tk, ek, gk) = (
        rand_t(&[n, 4], &mut rng),
        rand_t(&[n, 4], &mut rng),
        rand_t(&[n, 4], &mut rng),
        rand_t(&[n, 4], &mut rng),
    );
    let m = b
        .fuse_lowrank(
            &tape,
            tape.constant(&dk),
            tape.constant(&tk),
            tape.constant(&ek),
            tape.constant(&gk),
        )
        .unwrap();
    let joint = concat_ref(&[(dk.data(), 4), (tk.data(), 4), (ek.data(), 4)], n);
    let want = add_ref(
        &linear_ref(&b.phi_r1.layers[0], &joint, n),
        &linear_ref(&b.phi_r2.layers[0], gk.data(), n),
    );
    assert_close(&m.value(), &want, 1e-12);

    let bad = b.fuse_lowrank(
        &tape,
        tape.zeros(&[n, 4]),
        tape.zeros(&[n, 3]),
        tape.zeros(&[n, 4]),
        tape.zeros(&[n, 4]),
    );
    assert!(matches!(bad, Err(Error::Shape(_))));

    zero_all_biases(&mut b);
    let z = || tape.zeros(&[n, 4]);
    let m = b.fuse_lowrank(&tape, z(), z(), z(), z()).unwrap();
    assert!(m.value().iter().all(|&v| v == 0.0));
    let m = b
        .fuse_lowrank(
            &tape,
            tape.constant(&dk),
            tape.constant(&tk),
            tape.constant(&ek),
            z(),
        )
        .unwrap();
    assert_close(
        &m.value(),
        &linear_ref(&b.phi_r1.layers[0], &joint, n),
        1e-12,
    );
}

#[test]
fn reconstruct_examples() {
    let b = block(16, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let tape = Tape::new();
    let g = rand_t(&[6, 16], &mut rng);
    let f = b
        .reconstruct(&tape, tape.zeros(&[6, 4]), tape.constant(&g))
        .unwrap();
    assert_eq!(f.value(), g.data());

    let mk = rand_t(&[6, 4], &mut rng);
    let f = b
        .reconstruct(&tape, tape.constant(&mk), tape.constant(&g))
        .unwrap();
    let want = add_ref(&linear_ref(&b.big_phi_r, mk.data(), 6), g.data());
    assert_close(&f.value(), &want, 1e-12);

    let bad = b.reconstruct(&tape, tape.zeros(&[6, 5]), tape.constant(&g));
    assert!(matches!(bad, Err(Error::Shape(_))));
}

/// Stacks `F − G` over random inputs and modalities and checks that every
/// singular value past index k is negligible.
#[test]
fn residual_has_numerical_rank_at_most_k() {
    let (c, k) = (16, 4);
    let b = block(c, k, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut stacked = Vec::new();
    let mut rows = 0;
    for i in 0..24 {
        let tape = Tape::new();
        let feat = rand_t(&[1, c], &mut rng);
        let g = rand_t(&[1, c], &mut rng);
        let m = Modality::AUXILIARY[i % 3];
        let f = b
            .forward(&tape, tape.constant(&feat), m, tape.constant(&g))
            .unwrap();
        stacked.extend(f.value().iter().zip(g.data()).map(|(a, b)| a - b));
        rows += 1;
    }
    let s = singular_values(rows, c, &stacked);
    assert!(s[k - 1] > 1e-6, "expected full rank k, got {s:?}");
    for &v in &s[k..] {
        assert!(v / s[0] < 1e-8, "{s:?}");
    }
}

#[test]
fn single_depth_sample_equals_manual_composition() {
    let b = block(16, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let tape = Tape::new();
    let feat = tape.constant(&rand_t(&[4, 16], &mut rng));
    let g = tape.constant(&rand_t(&[4, 16], &mut rng));
    let f = b.forward(&tape, feat, Modality::Depth, g).unwrap();
    let dk = b
        .in_domain_lowrank(&tape, feat, Branch::Modality(Modality::Depth))
        .unwrap();
    let gk = b.in_domain_lowrank(&tape, g, Branch::Gradient).unwrap();
    let mk = b
        .fuse_lowrank(&tape, dk, tape.zeros(&[4, 4]), tape.zeros(&[4, 4]), gk)
        .unwrap();
    let manual = b.reconstruct(&tape, mk, g).unwrap();
    assert_eq!(f.value(), manual.value());
}

#[test]
fn absent_output_depends_only_on_gradient_feature() {
    let b = block(16, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let tape = Tape::new();
    let g = tape.constant(&rand_t(&[4, 16], &mut rng));
    let f1 = b
        .forward(
            &tape,
            tape.constant(&rand_t(&[4, 16], &mut rng)),
            Modality::Absent,
            g,
        )
        .unwrap();
    let f2 = b
        .forward(
            &tape,
            tape.constant(&rand_t(&[4, 16], &mut rng)),
            Modality::Absent,
            g,
        )
        .unwrap();
    assert_eq!(f1.value(), f2.value());
    assert!(f1.value().iter().all(|v| v.is_finite()));
}

#[test]
fn mixed_batch_has_no_cross_sample_leakage_and_permutes() {
    let b = block(16, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let tape = Tape::new();
    let samples: Vec<_> = [
        Modality::Depth,
        Modality::Thermal,
        Modality::Event,
        Modality::Absent,
    ]
    .iter()
    .map(|&m| {
        (
            tape.constant(&rand_t(&[3, 16], &mut rng)),
            m,
            tape.constant(&rand_t(&[3, 16], &mut rng)),
        )
    })
    .collect();
    let batch = b.forward_batch(&tape, &samples).unwrap();
    for (out, &(feat, m, g)) in batch.iter().zip(&samples) {
        let t2 = Tape::new();
        let again = b
            .forward(
                &t2,
                t2.constant(&feat.to_tensor()),
                m,
                t2.constant(&g.to_tensor()),
            )
            .unwrap();
        assert_eq!(out.value(), again.value());
    }
    let mut reversed = samples.clone();
    reversed.reverse();
    let out_rev = b.forward_batch(&tape, &reversed).unwrap();
    for (a, b) in batch.iter().zip(out_rev.iter().rev()) {
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn ablation_switches() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let feat = rand_t(&[4, 16], &mut rng);
    let g = rand_t(&[4, 16], &mut rng);
    let g2 = rand_t(&[4, 16], &mut rng);
    let run = |cfg: SharedEmbedConfig, m: Modality, g: &Tensor<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let b = SharedEmbedBlock::<f64>::new(cfg, &mut r).unwrap();
        let tape = Tape::new();
        b.forward(&tape, tape.constant(&feat), m, tape.constant(g))
            .unwrap()
            .value()
    };

    let mut no_edge = SharedEmbedConfig::new(16, 4);
    no_edge.explicit_edge = false;
    assert_eq!(
        run(no_edge.clone(), Modality::Depth, &g),
        run(no_edge, Modality::Depth, &g2)
    );

    let mut no_implicit = SharedEmbedConfig::new(16, 4);
    no_implicit.implicit_learning = false;
    assert_eq!(run(no_implicit, Modality::Thermal, &g), g.data());

    let mut no_domain = SharedEmbedConfig::new(16, 4);
    no_domain.in_domain_approx = false;
    let d = run(no_domain.clone(), Modality::Depth, &g);
    assert_eq!(d, run(no_domain.clone(), Modality::Event, &g));
    assert_ne!(d, run(SharedEmbedConfig::new(16, 4), Modality::Depth, &g));

    let mut dedicated = SharedEmbedConfig::new(16, 4);
    dedicated.absent_route = AbsentRoute::Dedicated;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    assert!(SharedEmbedBlock::<f64>::new(dedicated, &mut r)
        .unwrap()
        .sigma_absent
        .is_some());

    let mut hidden = SharedEmbedConfig::new(16, 4);
    hidden.hidden_mlp = true;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let hb = SharedEmbedBlock::<f64>::new(hidden, &mut r).unwrap();
    assert_eq!(hb.sigma_d.layers.len(), 2);
}

#[test]
fn block_passes_grad_check_on_ten_seeds() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut cfg = SharedEmbedConfig::new(16, 4);
        cfg.hidden_mlp = seed % 2 == 1;
        let mut b = SharedEmbedBlock::<f64>::new(cfg, &mut rng).unwrap();
        let feat = rand_t(&[8, 16], &mut rng).with_requires_grad(true);
        let g = rand_t(&[8, 16], &mut rng).with_requires_grad(true);
        let w = rand_t(&[8, 16], &mut rng);
        let m = Modality::AUXILIARY[seed as usize % 3];
        let err = grad_check_params(
            &mut b,
            |tape, b| {
                let f = b.forward(tape, tape.param(&feat), m, tape.param(&g))?;
                Ok(f.mul(tape.constant(&w))?.sum())
            },
            1e-5,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
        let err = crate::autodiff::grad_check(
            |tape, x| {
                let f = b.forward(tape, x, m, tape.constant(&g))?;
                Ok(f.mul(tape.constant(&w))?.sum())
            },
            &feat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed} input: {err}");
    }
}
