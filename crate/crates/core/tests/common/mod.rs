#![allow(dead_code)]

use std::sync::OnceLock;

use cola_core::backbone::{pretrain, BackboneConfig, BackboneModel, Example, PretrainConfig};
use cola_core::harness::stream::{pretraining_corpus, FamilyConfig};
use cola_core::lora::{init_adapter, AdapterConfig, AdapterWeights};
use cola_core::rng;

/// A briefly pretrained default-shape backbone, shared within a test binary.
pub fn small_model() -> &'static BackboneModel {
    static MODEL: OnceLock<BackboneModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = pretraining_corpus(&FamilyConfig::default(), 1500, 5).unwrap();
        let cfg = PretrainConfig { steps: 400, seed: 5, ..Default::default() };
        pretrain(&BackboneConfig::default(), &corpus, &cfg).unwrap().0
    })
}

/// Untrained backbone with random weights.
pub fn random_model(seed: u64) -> BackboneModel {
    BackboneModel::init(BackboneConfig::default(), seed).unwrap()
}

/// Adapter with every entry of `A` and `B` drawn from N(0, std²).
pub fn random_adapter(model: &BackboneModel, config: &AdapterConfig, seed: u64, std: f64) -> AdapterWeights {
    let mut w = init_adapter(config, model, None).unwrap();
    let mut g = rng::stream(seed, "test-adapter");
    for p in &mut w.points {
        for v in p.a.data_mut().iter_mut().chain(p.b.data_mut()) {
            *v = std * rng::normal(&mut g);
        }
    }
    w
}

pub fn random_examples(n: usize, len: usize, vocab: usize, classes: usize, seed: u64) -> Vec<Example> {
    use rand::Rng as _;
    let mut g = rng::stream(seed, "test-examples");
    (0..n)
        .map(|_| {
            let mut tokens: Vec<usize> = (0..len).map(|_| g.random_range(1..vocab)).collect();
            tokens[0] = 0;
            Example { tokens, label: g.random_range(0..classes) }
        })
        .collect()
}

/// `n` snapshots spanning a `dim`-dimensional subspace of width
/// `rank · (d + k)` for a single value-projection adapter.
pub fn snapshot_population(n: usize, dim: usize, seed: u64) -> Vec<cola_core::lora::AdapterSnapshot> {
    use cola_core::backbone::{InjectionPoint, Projection};
    let model = random_model(0);
    let config = AdapterConfig { points: vec![InjectionPoint::new(0, Projection::Value)], ..Default::default() };
    let template = init_adapter(&config, &model, None).unwrap().vectorize("t");
    let width = template.len();
    let mut g = rng::stream(seed, "test-population");
    let basis: Vec<Vec<f64>> = (0..dim).map(|_| rng::normal_vec(&mut g, width, 1.0)).collect();
    (0..n)
        .map(|i| {
            let mix = rng::normal_vec(&mut g, dim, 1.0);
            let flat = (0..width).map(|c| basis.iter().zip(&mix).map(|(b, m)| b[c] * m).sum()).collect();
            cola_core::lora::AdapterSnapshot { task_id: format!("task{i:02}"), flat, layout: template.layout.clone() }
        })
        .collect()
}

pub fn small_cae() -> cola_core::cae::CaeConfig {
    cola_core::cae::CaeConfig { latent_dim: 8, hidden: 32, max_steps: 3000, seed: 3, ..Default::default() }
}

/// Finalized store of `n` random adapters for the shared model.
pub fn random_store(n: usize, seed: u64) -> (cola_core::store::LatentStore, Vec<cola_core::lora::AdapterSnapshot>) {
    use cola_core::store::{Lifelong, StoreConfig};
    let model = small_model();
    let config = AdapterConfig::default();
    let snaps: Vec<_> = (0..n)
        .map(|i| random_adapter(model, &config, seed * 100 + i as u64, 0.2).vectorize(&format!("task{i:02}")))
        .collect();
    let cfg = StoreConfig { buffer_capacity: n, cae: small_cae(), ..Default::default() };
    let mut life = Lifelong::new(cfg, snaps[0].len(), config.scale()).unwrap();
    for s in &snaps {
        life.submit(s.clone()).unwrap();
    }
    life.finalize().unwrap();
    (life.into_store(), snaps)
}
