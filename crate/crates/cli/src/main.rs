use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cola_core::backbone::{BackboneModel, PretrainReport};
use cola_core::harness::{
    prepare_backbone, run_cola, run_fidelity_sweep, run_transfer_probe, task_order, train_stream_adapters, MultiRunReport, RunReport,
    StreamConfig,
};
use cola_core::harness::stream::generate_tasks;
use cola_core::selection::select_adapter;
use cola_core::store::{break_even_tasks, LatentStore};

#[derive(Parser)]
#[command(name = "cola", version, about = "Continual learning with compressed LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Reuse a pretrained backbone instead of pretraining one.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze a backbone.
    Pretrain(Common),
    /// Run the task stream once per configured task order.
    RunStream(Common),
    /// Scratch vs warm-start training on related and unrelated task pairs.
    RunTransfer(Common),
    /// Reconstruction score vs accuracy over autoencoder checkpoints.
    RunSweep(Common),
    /// Latent store utilities.
    Store {
        #[command(subcommand)]
        command: StoreCommand,
    },
    /// Summarize the reports in an output directory.
    Report {
        #[arg(default_value = "out")]
        dir: PathBuf,
    },
    /// Route one token sequence to a stored adapter by perplexity.
    Select {
        #[arg(long)]
        store: PathBuf,
        /// Token ids separated by commas or spaces.
        #[arg(long)]
        input: String,
        /// Defaults to `backbone.bin` next to the store.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Skip scoring and use this adapter.
        #[arg(long)]
        task_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Print the contents and byte accounting of a store file.
    Inspect { file: PathBuf },
}

fn load_config(c: &Common) -> anyhow::Result<StreamConfig> {
    let cfg = match &c.config {
        Some(p) => StreamConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => StreamConfig::default(),
    };
    let seed = c.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn backbone(c: &Common, cfg: &StreamConfig) -> anyhow::Result<(BackboneModel, Option<PretrainReport>)> {
    match &c.backbone {
        Some(p) => {
            // An unfrozen backbone is refused downstream as an invariant
            // violation.
            let model = BackboneModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok((model, None))
        }
        None => {
            eprintln!("pretraining backbone");
            let (model, report) = prepare_backbone(cfg)?;
            Ok((model, Some(report)))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(c: &Common, cfg: &StreamConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&c.out_dir)?;
    std::fs::write(c.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn pretrain_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    prepare_out(c, &cfg)?;
    let (model, report) = prepare_backbone(&cfg)?;
    model.save(c.out_dir.join("backbone.bin"))?;
    write_json(&c.out_dir.join("pretrain.json"), &report)?;
    println!(
        "backbone: {} parameters, loss {:.4} -> {:.4}, checksum {}",
        model.param_count(),
        report.initial_loss,
        report.final_loss,
        model.checksum()
    );
    Ok(())
}

fn summary_line(r: &RunReport) -> String {
    let mut s = format!("order {:?}: cola {:.3}", r.order, r.cola.average_accuracy);
    if let Some(m) = &r.adapter_style {
        s += &format!(", adapter-style {:.3}", m.average_accuracy);
    }
    if let Some(m) = &r.vanilla {
        s += &format!(", vanilla {:.3}", m.average_accuracy);
    }
    s + &format!(", routing {:.3}, {:.1}s", r.routing_accuracy, r.timings.total_secs)
}

fn run_stream_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    prepare_out(c, &cfg)?;
    let (model, pretrain) = backbone(c, &cfg)?;
    model.save(c.out_dir.join("backbone.bin"))?;
    let (_, stream) = generate_tasks(&cfg.family, cfg.tasks, cfg.seed)?;
    let seeds = if cfg.order_seeds.is_empty() { vec![0] } else { cfg.order_seeds.clone() };
    let mut runs = Vec::with_capacity(seeds.len());
    for (k, &s) in seeds.iter().enumerate() {
        let order = task_order(cfg.tasks, s);
        let permuted = order.iter().map(|&i| stream[i].clone()).collect();
        let out = run_cola(&model, permuted, order, &cfg)?;
        out.report.write(&c.out_dir.join(format!("order-{s}")))?;
        if k == 0 {
            out.store.save(c.out_dir.join("store.bin"))?;
        }
        println!("{}", summary_line(&out.report));
        runs.push(out.report);
    }
    let multi = MultiRunReport::new(pretrain, runs);
    multi.write(&c.out_dir)?;
    println!(
        "mean over {} orders: cola {:.3}, routing {:.3}",
        multi.runs.len(),
        multi.cola_average_accuracy,
        multi.routing_accuracy
    );
    Ok(())
}

fn run_transfer_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    prepare_out(c, &cfg)?;
    let (model, _) = backbone(c, &cfg)?;
    let report = run_transfer_probe(&model, &cfg)?;
    report.write(&c.out_dir)?;
    for p in report.related.iter().chain(&report.unrelated) {
        println!(
            "seed {} {} donor {}: steps to {:.3}: scratch {:?}, warm {:?}",
            p.seed,
            if p.related { "related  " } else { "unrelated" },
            p.donor,
            p.target_accuracy,
            p.scratch_steps,
            p.warm_steps
        );
    }
    println!("warm start faster on {}/{} related pairs", report.related_wins(), report.related.len());
    Ok(())
}

fn run_sweep_cmd(c: &Common) -> anyhow::Result<()> {
    let cfg = load_config(c)?;
    prepare_out(c, &cfg)?;
    let (model, _) = backbone(c, &cfg)?;
    let (adapters, tests) = train_stream_adapters(&model, &cfg)?;
    let report = run_fidelity_sweep(&model, &adapters, &tests, &cfg)?;
    report.write(&c.out_dir)?;
    for r in &report.rows {
        println!("step {:>5}  score {:.4}  accuracy {:.3}", r.step.unwrap_or(0), r.score, r.accuracy);
    }
    println!("original adapters: accuracy {:.3}", report.baseline.accuracy);
    match report.spearman {
        Some(rho) => println!("spearman {rho:.3} over {} checkpoints", report.rows.len()),
        None => println!("spearman undefined over {} checkpoints", report.rows.len()),
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    tasks: Vec<String>,
    snapshot_len: usize,
    code_len: usize,
    adapter_scale: f64,
    encoder_retained: bool,
    min_recorded_score: Option<f64>,
    store_bytes: usize,
    decoder_bytes: usize,
    per_task_code_bytes: f64,
    adapter_payload_bytes: usize,
    break_even_tasks: Option<u64>,
}

fn inspect_cmd(file: &Path) -> anyhow::Result<()> {
    let store = LatentStore::load(file).with_context(|| format!("loading {}", file.display()))?;
    let store_bytes = std::fs::metadata(file)?.len() as usize;
    let decoder_bytes = store.without_codes().to_bytes().len();
    let snapshot_len = store.layout().map_or(0, |l| l.len());
    let code_len = store.cae().map_or(0, |c| c.code_len());
    let report = Inspection {
        tasks: store.task_ids(),
        snapshot_len,
        code_len,
        adapter_scale: store.adapter_scale(),
        encoder_retained: store.encoder_retained(),
        min_recorded_score: store.min_recorded_score(),
        store_bytes,
        decoder_bytes,
        per_task_code_bytes: if store.is_empty() { 0.0 } else { (store_bytes - decoder_bytes) as f64 / store.len() as f64 },
        adapter_payload_bytes: 4 * snapshot_len,
        break_even_tasks: break_even_tasks(decoder_bytes as u64, snapshot_len as u64, code_len as u64),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report_cmd(dir: &Path) -> anyhow::Result<()> {
    let mut found = false;
    let summary = dir.join("summary.json");
    if summary.exists() {
        let multi: MultiRunReport = serde_json::from_str(&std::fs::read_to_string(&summary)?)?;
        for r in &multi.runs {
            println!("{}", summary_line(r));
            for t in &r.tasks {
                println!(
                    "  {}  post {:.3}  final {:.3}  score {:.4}  routing {:.3}",
                    t.task_id, t.post_training_accuracy, t.final_accuracy, t.reconstruction_score, t.routing_accuracy
                );
            }
        }
        println!("mean: cola {:.3}, routing {:.3}", multi.cola_average_accuracy, multi.routing_accuracy);
        found = true;
    }
    for name in ["transfer.json", "sweep.json", "pretrain.json"] {
        let p = dir.join(name);
        if p.exists() {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            println!("{name}: {} top-level fields", v.as_object().map_or(0, |o| o.len()));
            found = true;
        }
    }
    if !found {
        bail!("no reports found in {}", dir.display());
    }
    Ok(())
}

fn parse_tokens(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().with_context(|| format!("bad token {t:?}")))
        .collect()
}

fn select_cmd(store: &Path, input: &str, backbone: Option<&Path>, task_id: Option<&str>) -> anyhow::Result<()> {
    let latent = LatentStore::load(store).with_context(|| format!("loading {}", store.display()))?;
    let default = store.with_file_name("backbone.bin");
    let bpath = backbone.unwrap_or(&default);
    let model = BackboneModel::load(bpath).with_context(|| format!("loading {}", bpath.display()))?;
    let tokens = parse_tokens(input)?;
    let result = select_adapter(&latent, &model, &tokens, task_id)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Pretrain(c) => pretrain_cmd(c),
        Command::RunStream(c) => run_stream_cmd(c),
        Command::RunTransfer(c) => run_transfer_cmd(c),
        Command::RunSweep(c) => run_sweep_cmd(c),
        Command::Store { command: StoreCommand::Inspect { file } } => inspect_cmd(file),
        Command::Report { dir } => report_cmd(dir),
        Command::Select { store, input, backbone, task_id } => select_cmd(store, input, backbone.as_deref(), task_id.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e.chain().any(|c| c.downcast_ref::<cola_core::Error>().is_some_and(cola_core::Error::is_invariant));
            ExitCode::from(if invariant { 3 } else { 1 })
        }
    }
}
