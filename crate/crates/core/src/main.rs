//! Command-line interface: dataset generation, training, streaming
//! inference, ablation experiments, attention export, and memory reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as ProcessCommand;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use slidemamba::ablation::{run_ablation, AblationMode};
use slidemamba::data::{
    generate_bag, read_bag, read_bag_csv, write_bag, write_bag_csv, BagLabel, SyntheticSpec,
    TaskKind, TileBag,
};
use slidemamba::engine::{
    chunk_iter, forward_stream, load_checkpoint, peak_memory_report, save_checkpoint,
    write_memory_report_csv, EngineLedgers, Structure,
};
use slidemamba::export::{export_attention, write_scores_csv};
use slidemamba::hilbert::{order_bag, OrderStrategy};
use slidemamba::metrics::c_index;
use slidemamba::tensor::Dtype;
use slidemamba::train::{classification_report, gather_rows, test_outputs, train, TrainConfig};
use slidemamba::{Error, Result};

#[derive(Parser)]
#[command(name = "slidemamba", version, about = "Hilbert-ordered MIL aggregation for whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bag dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Streaming inference on a single bag.
    Infer(InferArgs),
    /// Run the ordering or structure ablation.
    Ablate(AblateArgs),
    /// Export per-tile attention scores for a bag.
    ExportAttn(ExportArgs),
    /// Measure streaming-inference peak memory across slide sizes.
    MemReport(MemReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "classification")]
    task: String,
    #[arg(long, default_value_t = 500)]
    bags: usize,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2.0)]
    snr: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.15)]
    planted_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    spatial_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    censor_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write debug CSVs next to the binary bags (dim <= 64 only).
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Run output directory (checkpoint, history, manifest).
    #[arg(long)]
    out: PathBuf,
    /// TOML file mirroring the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// hilbert | zorder | rowmajor | random
    #[arg(long)]
    order: Option<String>,
    /// full | local_only | global_only | reversed
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Store checkpoint weights in f32 instead of f64.
    #[arg(long)]
    f32_weights: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bag file (.slbg, or .csv debug form).
    #[arg(long)]
    bag: PathBuf,
    #[arg(long, default_value_t = 64)]
    chunk_len: usize,
    /// Chunks per streaming mini-batch.
    #[arg(long, default_value_t = 4)]
    inf_batch: usize,
    #[arg(long, default_value = "hilbert")]
    order: String,
    /// Print a per-stage peak-memory CSV for this bag.
    #[arg(long)]
    mem_report: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// ordering | structure
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    bags: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 48)]
    grid: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2.0)]
    snr: f64,
    #[arg(long, default_value_t = 0.15)]
    planted_frac: f64,
    #[arg(long, default_value_t = 0.8)]
    spatial_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bag: PathBuf,
    /// Output CSV path (x, y, score).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "hilbert")]
    order: String,
}

#[derive(Args)]
struct MemReportArgs {
    /// Slide sizes to measure, comma separated.
    #[arg(long, default_value = "256,4096,65536")]
    ns: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    chunk_len: usize,
    #[arg(long, default_value_t = 4)]
    inf_batch: usize,
    /// Measure an existing checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: SyntheticSpec,
    n_bags: usize,
    files: Vec<String>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    dataset: String,
    git_hash: String,
    best_epoch: usize,
    best_val_metric: f64,
    epochs_run: usize,
    test_metrics: serde_json::Value,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ExportAttn(args) => cmd_export(args),
        Command::MemReport(args) => cmd_mem_report(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let task = match args.task.as_str() {
        "classification" => TaskKind::Classification,
        "survival" => TaskKind::Survival,
        other => return Err(Error::Config(format!("unknown task '{other}'"))),
    };
    let spec = SyntheticSpec {
        grid: args.grid,
        dim: args.dim,
        task,
        num_classes: args.classes,
        noise: args.noise,
        snr: args.snr,
        planted_frac: args.planted_frac,
        spatial_noise: args.spatial_noise,
        censor_rate: args.censor_rate,
        seed: args.seed,
        ..Default::default()
    };
    let bag_dir = args.out.join("bags");
    fs::create_dir_all(&bag_dir)?;
    let mut files = Vec::with_capacity(args.bags);
    for i in 0..args.bags {
        let bag = generate_bag(&spec, i as u64)?;
        let name = format!("bag_{i:05}.slbg");
        write_bag(&bag_dir.join(&name), &bag)?;
        if args.csv {
            write_bag_csv(&bag_dir.join(format!("bag_{i:05}.csv")), &bag)?;
        }
        files.push(format!("bags/{name}"));
    }
    let manifest = DatasetManifest { spec, n_bags: args.bags, files };
    write_json(&args.out.join("dataset.json"), &manifest)?;
    println!("wrote {} bags to {}", args.bags, args.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<TileBag>)> {
    let manifest: DatasetManifest = read_json(&dir.join("dataset.json"))?;
    let bags = manifest
        .files
        .iter()
        .map(|f| read_bag(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, bags))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(order) = &args.order {
        cfg.ordering = order.clone();
    }
    if let Some(structure) = &args.structure {
        cfg.structure = Structure::parse(structure)?;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;

    let (_manifest, bags) = load_dataset(&args.data)?;
    eprintln!("loaded {} bags from {}", bags.len(), args.data.display());
    let result = train(&cfg, &bags, !args.quiet)?;

    fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.slck");
    let dtype = if args.f32_weights { Dtype::F32 } else { Dtype::F64 };
    save_checkpoint(&ckpt_path, &result.params, dtype)?;

    let mut history = String::from("epoch,lr,train_loss,val_metric\n");
    for h in &result.history {
        history.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_metric));
    }
    fs::write(args.out.join("history.csv"), history)?;

    let outputs = test_outputs(&cfg, &bags, &result)?;
    let test_metrics = match result.params.task {
        TaskKind::Classification => {
            let m = classification_report(&result.params, &outputs)?;
            serde_json::json!({"accuracy": m.accuracy, "auc": m.auc, "macro_f1": m.macro_f1})
        }
        TaskKind::Survival => {
            let risks: Vec<f64> = outputs.scores.iter().map(|s| s[0]).collect();
            let ci = c_index(&risks, &outputs.times, &outputs.events)?;
            serde_json::json!({"c_index": ci})
        }
    };
    let manifest = RunManifest {
        config: &cfg,
        dataset: args.data.display().to_string(),
        git_hash: git_hash(),
        best_epoch: result.best_epoch,
        best_val_metric: result.best_val,
        epochs_run: result.history.len(),
        test_metrics: test_metrics.clone(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("best epoch {} (val {:.4}); test metrics: {test_metrics}", result.best_epoch, result.best_val);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn load_bag_file(path: &Path) -> Result<TileBag> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_bag_csv(path, BagLabel::Class(0)),
        _ => read_bag(path),
    }
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let mut params = load_checkpoint(&args.checkpoint)?;
    params.dims.chunk_len = args.chunk_len;
    let bag = load_bag_file(&args.bag)?;
    let strategy = OrderStrategy::parse(&args.order, 0)?;
    let order = order_bag(&bag, strategy)?;
    let x = gather_rows(&bag.features, &order.perm);

    let ledgers = EngineLedgers::new();
    let out = forward_stream(
        chunk_iter(&x, params.dims.chunk_len),
        &params,
        args.inf_batch,
        Some(&ledgers),
        false,
    )?;
    let logits = out.logits.data();
    match params.task {
        TaskKind::Classification => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let probs: Vec<f64> = exp.iter().map(|v| v / z).collect();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            println!("logits: {logits:?}");
            println!("probs:  {probs:?}");
            println!("predicted class: {pred}");
        }
        TaskKind::Survival => {
            println!("risk score: {}", logits[0]);
        }
    }
    if args.mem_report {
        let mut csv = Vec::new();
        writeln!(csv, "n,stage,peak_bytes")?;
        writeln!(csv, "{},local,{}", bag.num_tiles(), ledgers.local.peak_bytes())?;
        writeln!(csv, "{},global,{}", bag.num_tiles(), ledgers.global.peak_bytes())?;
        print!("{}", String::from_utf8_lossy(&csv));
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mode = AblationMode::parse(&args.mode)?;
    let spec = SyntheticSpec {
        grid: args.grid,
        dim: args.dim,
        task: TaskKind::Classification,
        num_classes: 2,
        snr: args.snr,
        planted_frac: args.planted_frac,
        spatial_noise: args.spatial_noise,
        blob_radius: (6, 9),
        seed: args.seed,
        ..Default::default()
    };
    let cfg = TrainConfig { epochs: args.epochs, patience: args.epochs, ..Default::default() };
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.seed + 11 * (i + 1)).collect();
    let report = run_ablation(mode, &spec, args.bags, &cfg, &seeds, !args.quiet)?;

    fs::create_dir_all(args.out.parent().unwrap_or(Path::new(".")))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(&args.out, &csv)?;
    for row in &report.rows {
        let (auc_m, auc_s) = row.mean_std(|m| m.auc);
        println!("{:12} auc {:.4} ± {:.4}", row.variant, auc_m, auc_s);
    }
    println!("report: {}", args.out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let bag = load_bag_file(&args.bag)?;
    let strategy = OrderStrategy::parse(&args.order, 0)?;
    let scores = export_attention(&params, &bag, strategy)?;
    let mut csv = Vec::new();
    write_scores_csv(&mut csv, &scores)?;
    fs::write(&args.out, &csv)?;
    println!("wrote {} tile scores to {}", scores.len(), args.out.display());
    Ok(())
}

fn cmd_mem_report(args: MemReportArgs) -> Result<()> {
    let ns: Vec<usize> = args
        .ns
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| Error::Config(format!("bad slide size '{s}': {e}"))))
        .collect::<Result<_>>()?;
    let params = match &args.checkpoint {
        Some(path) => {
            let mut p = load_checkpoint(path)?;
            p.dims.chunk_len = args.chunk_len;
            p
        }
        None => {
            let mut dims = slidemamba::engine::ModelDims::new(args.dim, 2);
            dims.chunk_len = args.chunk_len;
            slidemamba::engine::ModelParams::init(dims, Structure::Full, TaskKind::Classification, 0)?
        }
    };
    let rows = peak_memory_report(&ns, &params, args.inf_batch)?;
    let mut csv = Vec::new();
    write_memory_report_csv(&mut csv, &rows)?;
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("report: {}", path.display());
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn git_hash() -> String {
    ProcessCommand::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
