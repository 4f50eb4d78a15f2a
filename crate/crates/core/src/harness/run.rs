use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::baselines::fine_tune_full;
use super::config::StreamConfig;
use super::eval::evaluate_routed;
use super::report::{MethodReport, MultiRunReport, RunReport, TaskRow, Timings};
use super::stream::{generate_tasks, pretraining_corpus, TaskSpec};
use crate::backbone::{pretrain, BackboneModel, Example, PretrainReport, TaskDataset};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, train_task, AdapterSnapshot, AdapterWeights};
use crate::rng;
use crate::selection::pick_warm_start;
use crate::store::{LatentStore, Lifelong, StorageReport};

/// Pretrains and freezes a backbone on the family's generic corpus.
pub fn prepare_backbone(cfg: &StreamConfig) -> Result<(BackboneModel, PretrainReport)> {
    cfg.validate()?;
    let corpus = pretraining_corpus(&cfg.family, cfg.corpus_size, cfg.seed)?;
    pretrain(&cfg.backbone, &corpus, &cfg.pretrain)
}

/// The configured task stream with its generating specs.
pub fn generate_stream(cfg: &StreamConfig) -> Result<(Vec<TaskSpec>, Vec<TaskDataset>)> {
    cfg.validate()?;
    generate_tasks(&cfg.family, cfg.tasks, cfg.seed)
}

/// Everything a run leaves behind besides its report.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    /// The finalized latent store.
    pub store: LatentStore,
    /// Uncompressed adapters, i.e. the adapter-style baseline's memory.
    pub originals: Vec<AdapterSnapshot>,
    /// Held-out test splits in training order.
    pub tests: Vec<(String, Vec<Example>)>,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs the full adapt–compress–route lifecycle over `stream` in the given
/// order, with the configured baselines alongside.
///
/// Each task's training data is moved into the loop and must be
/// unreachable before the next task starts.
pub fn run_cola(model: &BackboneModel, stream: Vec<TaskDataset>, order: Vec<usize>, cfg: &StreamConfig) -> Result<RunOutput> {
    let start = Instant::now();
    if !model.is_frozen() {
        return Err(Error::Invariant("run_cola needs a frozen backbone".into()));
    }
    if stream.len() < 2 {
        return Err(Error::Config(format!("a stream needs at least 2 tasks, got {}", stream.len())));
    }
    cfg.adapter.validate(model)?;
    let checksum = model.checksum();
    let snapshot_len = cfg.adapter.snapshot_len(model)?;
    let mut life = Lifelong::new(cfg.store.clone(), snapshot_len, cfg.adapter.scale())?;
    let mut stream = stream;
    let tests: Vec<(String, Vec<Example>)> = stream.iter_mut().map(|d| (d.task_id.clone(), d.take_test())).collect();
    let task_ids: Vec<String> = tests.iter().map(|(id, _)| id.clone()).collect();

    let mut originals: Vec<AdapterSnapshot> = Vec::new();
    let mut vanilla_model = cfg.baselines.vanilla.then(|| model.thawed());
    let (mut acc_cola, mut acc_style, mut acc_vanilla) = (Vec::new(), Vec::new(), Vec::new());
    let mut post = Vec::new();
    let mut metrics = Vec::new();
    let mut warm_from = Vec::new();
    let mut timings = Timings::default();
    let last = stream.len() - 1;

    for (i, data) in stream.into_iter().enumerate() {
        let task_id = data.task_id.clone();
        let ctx = |e: Error| e.in_task(i, &task_id);
        let data = Arc::new(data);
        let audit = Arc::downgrade(&data);

        let t = Instant::now();
        let donor = if cfg.warm_start && !life.store().is_empty() {
            let sample: Vec<&[usize]> = data.train.iter().take(cfg.warm_start_sample).map(|e| e.tokens.as_slice()).collect();
            let id = pick_warm_start(life.store(), model, &sample).map_err(ctx)?;
            Some((id.clone(), life.store().fetch_adapter(&id).map_err(ctx)?))
        } else {
            None
        };
        let adapter = init_adapter(&cfg.adapter, model, donor.as_ref().map(|(_, s)| s)).map_err(ctx)?;
        let (adapter, m) = train_task(model, adapter, &data, &cfg.adapter).map_err(ctx)?;
        timings.adapters_secs += secs(t);
        warm_from.push(donor.map(|(id, _)| id));
        post.push(model.accuracy(Some(&adapter), &tests[i].1).map_err(ctx)?);
        metrics.push(m);

        if let Some(vm) = vanilla_model.as_mut() {
            let t = Instant::now();
            fine_tune_full(vm, &data, &cfg.vanilla, cfg.seed).map_err(ctx)?;
            timings.vanilla_secs += secs(t);
        }

        drop(data);
        if audit.upgrade().is_some() {
            return Err(Error::Invariant(format!("training data of {task_id} is still reachable")));
        }

        let t = Instant::now();
        let snapshot = adapter.vectorize(&task_id);
        if cfg.baselines.adapter_style {
            originals.push(snapshot.clone());
        }
        life.submit(snapshot).map_err(ctx)?;
        if i == last {
            life.finalize().map_err(ctx)?;
        }
        timings.cae_secs += secs(t);

        let t = Instant::now();
        let seen: Vec<(&str, &[Example])> = tests[..=i].iter().map(|(id, ex)| (id.as_str(), ex.as_slice())).collect();
        let mut candidates = weights_of(&life.store().fetch_all().or_else(|e| if life.store().is_empty() { Ok(Vec::new()) } else { Err(e) })?, cfg)?;
        // Adapters still waiting in the buffer are served raw.
        candidates.extend(weights_of(&life.buffer().iter().cloned().collect::<Vec<_>>(), cfg)?);
        let routed = evaluate_routed(model, &candidates, &seen).map_err(ctx)?;
        acc_cola.push(routed.accuracy);
        if cfg.baselines.adapter_style {
            acc_style.push(evaluate_routed(model, &weights_of(&originals, cfg)?, &seen).map_err(ctx)?.accuracy);
        }
        if let Some(vm) = vanilla_model.as_ref() {
            let row = seen.iter().map(|(_, ex)| vm.accuracy(None, ex)).collect::<Result<Vec<_>>>().map_err(ctx)?;
            acc_vanilla.push(row);
        }
        timings.evaluation_secs += secs(t);
    }

    if model.checksum() != checksum {
        return Err(Error::Invariant("backbone weights changed during the run".into()));
    }
    let store = life.store().clone();
    let all: Vec<(&str, &[Example])> = tests.iter().map(|(id, ex)| (id.as_str(), ex.as_slice())).collect();
    let finals = evaluate_routed(model, &weights_of(&store.fetch_all()?, cfg)?, &all)?;
    let cola = MethodReport::new("cola", acc_cola);
    let mut rows = Vec::with_capacity(task_ids.len());
    for (j, id) in task_ids.iter().enumerate() {
        let decoded = store.fetch_adapter(id)?.to_weights(cfg.adapter.scale())?;
        let final_accuracy = cola.final_row()[j];
        rows.push(TaskRow {
            task_id: id.clone(),
            post_training_accuracy: post[j],
            decoded_accuracy: model.accuracy(Some(&decoded), &tests[j].1)?,
            final_accuracy,
            forgetting: cola.forgetting[j],
            post_training_drop: post[j] - final_accuracy,
            reconstruction_score: store.code(id).and_then(|c| c.score).expect("codes from this run carry scores"),
            routing_accuracy: finals.routing[j],
            warm_start_from: warm_from[j].clone(),
        });
    }
    let adapter_bytes = originals.first().map_or_else(|| 0, |s| s.to_bytes().len());
    let storage = StorageReport::measure(
        &store,
        model.to_bytes().len(),
        adapter_bytes,
        snapshot_len,
        cfg.store.buffer_capacity * adapter_bytes,
    );
    timings.total_secs = secs(start);
    let report = RunReport {
        config: cfg.clone(),
        order,
        task_ids,
        backbone_checksum: checksum,
        routing_accuracy: super::report::mean(&finals.routing),
        cola,
        adapter_style: cfg.baselines.adapter_style.then(|| MethodReport::new("adapter_style", acc_style)),
        vanilla: cfg.baselines.vanilla.then(|| MethodReport::new("vanilla", acc_vanilla)),
        tasks: rows,
        storage,
        cae_events: life.events().to_vec(),
        adapter_training: metrics,
        timings,
    };
    Ok(RunOutput { report, store, originals, tests })
}

fn weights_of(snapshots: &[AdapterSnapshot], cfg: &StreamConfig) -> Result<Vec<(String, AdapterWeights)>> {
    snapshots.iter().map(|s| Ok((s.task_id.clone(), s.to_weights(cfg.adapter.scale())?))).collect()
}

/// Task permutation for one order seed; seed 0 keeps generation order.
pub fn task_order(tasks: usize, order_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tasks).collect();
    if order_seed != 0 {
        order.shuffle(&mut rng::stream(order_seed, "task-order"));
    }
    order
}

/// Generates the stream and runs it once in generation order.
pub fn run_stream(model: &BackboneModel, cfg: &StreamConfig) -> Result<RunOutput> {
    let (_, stream) = generate_stream(cfg)?;
    run_cola(model, stream, (0..cfg.tasks).collect(), cfg)
}

/// One run per configured order seed, averaged.
pub fn run_multi(model: &BackboneModel, cfg: &StreamConfig, pretrain: Option<PretrainReport>) -> Result<MultiRunReport> {
    let (_, stream) = generate_stream(cfg)?;
    let seeds = if cfg.order_seeds.is_empty() { vec![0] } else { cfg.order_seeds.clone() };
    let mut runs = Vec::with_capacity(seeds.len());
    for s in seeds {
        let order = task_order(cfg.tasks, s);
        let permuted: Vec<TaskDataset> = order.iter().map(|&i| stream[i].clone()).collect();
        runs.push(run_cola(model, permuted, order, cfg)?.report);
    }
    Ok(MultiRunReport::new(pretrain, runs))
}
