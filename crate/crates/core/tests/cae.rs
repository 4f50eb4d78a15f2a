mod common;

use cola_core::cae::{train_cae, Activation, CaeConfig, CaeModel, Dense, Mlp, Normalizer, Standardize};
use cola_core::numerics::Tensor;
use cola_core::{rng, Error};
use common::snapshot_population;
use proptest::prelude::*;

fn dense(out: usize, inp: usize, activation: Activation, seed: u64) -> Dense {
    let mut g = rng::stream(seed, "dense");
    Dense {
        w: Tensor::matrix(out, inp, rng::normal_vec(&mut g, out * inp, 0.4)).unwrap(),
        b: Tensor::matrix(1, out, rng::normal_vec(&mut g, out, 0.4)).unwrap(),
        activation,
    }
}

fn single_layer(width: usize, m: usize, activation: Activation, seed: u64) -> CaeModel {
    let cfg = CaeConfig { latent_dim: m, hidden: 0, latent_activation: activation, ..Default::default() };
    let enc = Mlp { layers: vec![dense(m, width, activation, seed)] };
    let dec = Mlp { layers: vec![dense(width, m, Activation::Identity, seed + 1)] };
    CaeModel::from_parts(cfg, Some(enc), dec, Normalizer::identity(width)).unwrap()
}

fn input(width: usize, seed: u64) -> Vec<f64> {
    rng::normal_vec(&mut rng::stream(seed, "input"), width, 1.0)
}

#[test]
fn linear_encoder_penalty_is_frobenius_norm() {
    let cae = single_layer(40, 5, Activation::Identity, 1);
    let w = &cae.encoder().unwrap().layers[0].w;
    let want: f64 = w.data().iter().map(|v| v * v).sum();
    for s in 0..3 {
        let got = cae.contractive_penalty(&input(40, s)).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn sigmoid_encoder_penalty_matches_closed_form() {
    let cae = single_layer(40, 5, Activation::Sigmoid, 2);
    let layer = &cae.encoder().unwrap().layers[0];
    let x = input(40, 7);
    let mut want = 0.0;
    for j in 0..5 {
        let row = &layer.w.data()[j * 40..(j + 1) * 40];
        let pre: f64 = row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + layer.b.data()[j];
        let h = 1.0 / (1.0 + (-pre).exp());
        let norm_sq: f64 = row.iter().map(|w| w * w).sum();
        want += (h * (1.0 - h)).powi(2) * norm_sq;
    }
    let got = cae.contractive_penalty(&x).unwrap();
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn two_layer_penalty_matches_explicit_jacobian() {
    let (width, hidden, m) = (24, 7, 4);
    let cfg = CaeConfig { latent_dim: m, hidden, ..Default::default() };
    let l1 = dense(hidden, width, Activation::Tanh, 3);
    let l2 = dense(m, hidden, Activation::Identity, 4);
    let dec = Mlp { layers: vec![dense(hidden, m, Activation::Tanh, 5), dense(width, hidden, Activation::Identity, 6)] };
    let cae = CaeModel::from_parts(cfg, Some(Mlp { layers: vec![l1.clone(), l2.clone()] }), dec, Normalizer::identity(width)).unwrap();
    let x = input(width, 8);
    // J = W2 · diag(1 − h²) · W1, summed entry by entry.
    let h: Vec<f64> = (0..hidden)
        .map(|j| ((0..width).map(|c| l1.w.at(j, c) * x[c]).sum::<f64>() + l1.b.data()[j]).tanh())
        .collect();
    let mut want = 0.0;
    for i in 0..m {
        for c in 0..width {
            let jic: f64 = (0..hidden).map(|j| l2.w.at(i, j) * (1.0 - h[j] * h[j]) * l1.w.at(j, c)).sum();
            want += jic * jic;
        }
    }
    let got = cae.contractive_penalty(&x).unwrap();
    assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn penalty_is_taken_in_standardized_coordinates() {
    let width = 40;
    let mut cae = single_layer(width, 5, Activation::Identity, 9);
    let plain = cae.contractive_penalty(&input(width, 1)).unwrap();
    let norm = Normalizer { mean: vec![3.0; width], std: vec![10.0; width] };
    let enc = cae.encoder().cloned();
    cae = CaeModel::from_parts(cae.config.clone(), enc, cae.decoder().clone(), norm).unwrap();
    assert!((cae.contractive_penalty(&input(width, 1)).unwrap() - plain).abs() < 1e-10);
}

#[test]
fn chunked_penalty_sums_over_chunks() {
    let cfg = CaeConfig { latent_dim: 5, hidden: 0, chunk_width: Some(20), ..Default::default() };
    let enc = Mlp { layers: vec![dense(5, 20, Activation::Identity, 10)] };
    let dec = Mlp { layers: vec![dense(20, 5, Activation::Identity, 11)] };
    let cae = CaeModel::from_parts(cfg, Some(enc.clone()), dec, Normalizer::identity(60)).unwrap();
    assert_eq!(cae.code_len(), 15);
    let want = 3.0 * enc.layers[0].w.frobenius_sq();
    assert!((cae.contractive_penalty(&input(60, 2)).unwrap() - want).abs() < 1e-10);
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let pop = snapshot_population(4, 3, 1);
    let batch: Vec<&[f64]> = pop.iter().map(|s| s.flat.as_slice()).collect();
    let cfg = CaeConfig { latent_dim: 6, hidden: 12, ..Default::default() };
    let cae = CaeModel::new(cfg, pop[0].len()).unwrap();
    let report = cae.check_loss_gradients(&batch, 0.05, 150, 4).unwrap();
    assert!(report.checked >= 100 && report.passes(1e-4), "{report:?}");
    let single = CaeModel::new(CaeConfig { latent_dim: 6, hidden: 0, latent_activation: Activation::Sigmoid, ..Default::default() }, pop[0].len()).unwrap();
    assert!(single.check_loss_gradients(&batch, 0.05, 120, 5).unwrap().passes(1e-4));
}

fn small_cfg() -> CaeConfig {
    CaeConfig { latent_dim: 8, hidden: 32, max_steps: 3000, seed: 3, ..Default::default() }
}

#[test]
fn training_reaches_the_threshold_for_every_snapshot() {
    let pop = snapshot_population(6, 3, 2);
    let cae = CaeModel::new(small_cfg(), pop[0].len()).unwrap();
    let (trained, report) = train_cae(&cae, &pop).unwrap();
    assert!(report.min_score >= 0.99, "{report:?}");
    for s in &pop {
        let code = trained.encode(s).unwrap();
        assert_eq!(code.z.len(), 8);
        assert!(code.score.unwrap() >= 0.99);
        let back = trained.decode(&code, &s.layout).unwrap();
        assert_eq!(back.layout, s.layout);
    }
}

#[test]
fn training_is_deterministic() {
    let pop = snapshot_population(4, 2, 3);
    let cfg = CaeConfig { max_steps: 200, threshold: 0.5, ..small_cfg() };
    let cae = CaeModel::new(cfg, pop[0].len()).unwrap();
    assert_eq!(train_cae(&cae, &pop).unwrap(), train_cae(&cae, &pop).unwrap());
}

#[test]
fn unreachable_threshold_is_reported() {
    let pop = snapshot_population(6, 6, 4);
    let cfg = CaeConfig { threshold: 0.999_999, max_steps: 30, ..small_cfg() };
    let cae = CaeModel::new(cfg, pop[0].len()).unwrap();
    match train_cae(&cae, &pop) {
        Err(Error::ThresholdUnreachable { steps, best, .. }) => {
            assert_eq!(steps, 30);
            assert!(best < 0.999_999);
        }
        other => panic!("expected ThresholdUnreachable, got {other:?}"),
    }
}

#[test]
fn chunked_training_reaches_the_threshold() {
    let pop = snapshot_population(4, 2, 5);
    let cfg = CaeConfig { chunk_width: Some(64), latent_dim: 8, ..small_cfg() };
    let cae = CaeModel::new(cfg, pop[0].len()).unwrap();
    let (trained, report) = train_cae(&cae, &pop).unwrap();
    assert_eq!(trained.code_len(), 16);
    assert!(report.min_score >= 0.99);
}

#[test]
fn discarded_encoder_cannot_encode() {
    let pop = snapshot_population(2, 2, 6);
    let mut cae = CaeModel::new(small_cfg(), pop[0].len()).unwrap();
    let code = cae.encode(&pop[0]).unwrap();
    cae.discard_encoder();
    assert!(matches!(cae.encode(&pop[0]), Err(Error::EncoderDiscarded)));
    assert!(cae.decode(&code, &pop[0].layout).is_ok());
}

#[test]
fn persistence_round_trips_the_rounded_model() {
    let pop = snapshot_population(2, 2, 7);
    let mut cae = CaeModel::new(small_cfg(), pop[0].len()).unwrap();
    assert_eq!(CaeModel::from_bytes(&cae.to_bytes()).unwrap(), cae.rounded());
    cae.discard_encoder();
    let back = CaeModel::from_bytes(&cae.to_bytes()).unwrap();
    assert!(!back.encoder_retained());
    let bytes = cae.to_bytes();
    assert!(CaeModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        CaeConfig { latent_dim: 40, ..small_cfg() },
        CaeConfig { lambda: 0.0, ..small_cfg() },
        CaeConfig { chunk_width: Some(100), ..small_cfg() },
        CaeConfig { latent_activation: Activation::Sigmoid, ..small_cfg() },
        CaeConfig { stop_score: Some(0.5), ..small_cfg() },
        CaeConfig { threshold: 1.5, ..small_cfg() },
    ];
    for cfg in bad {
        assert!(matches!(CaeModel::new(cfg.clone(), 128), Err(Error::Config(_))), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalizer_inverts(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..6)) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        for mode in [Standardize::PerCoordinate, Standardize::Centered, Standardize::Scaled] {
            let n = Normalizer::fit(&refs, mode).unwrap();
            for r in &rows {
                let back = n.invert(&n.apply(r));
                for (a, b) in back.iter().zip(r) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn penalty_is_non_negative(seed in 0u64..500) {
        let cae = single_layer(20, 4, Activation::Sigmoid, seed);
        prop_assert!(cae.contractive_penalty(&input(20, seed)).unwrap() >= 0.0);
    }
}
