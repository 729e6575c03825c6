use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dipsgnn_core::eval::config::{ExperimentConfig, Method};
use dipsgnn_core::eval::experiment::{
    self, cell_features, cell_privacy, cell_samples, evaluation_seed, prepare, prepare_split, run_cell, Cell,
};
use dipsgnn_core::eval::report::{EvalReport, Provenance};
use dipsgnn_core::eval::synthetic::{self, SyntheticConfig, SyntheticKind};
use dipsgnn_core::gnn::checkpoint::Checkpoint;
use dipsgnn_core::gnn::edgerand::edgerand_spec;
use dipsgnn_core::gnn::train::{evaluate, LogRecord};
use dipsgnn_core::graph_pipeline::{chronological_split, core_filter, read_interactions, write_interactions, SplitDataset};
use dipsgnn_core::ldp_feature::{read_feature_file, write_feature_file, FeatureSchema};
use dipsgnn_core::privacy_accountant::{extended_float, PrivacySpec};
use dipsgnn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dipsgnn", version, about = "Private sequential recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and chronologically split an interaction log.
    Ingest(IngestArgs),
    /// Noise scale for a privacy budget.
    Calibrate(CalibrateArgs),
    /// Train one model and save a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Run the method × budget × seed grid.
    Sweep(RunArgs),
    /// Write a synthetic dataset and a matching config.
    Synth(SynthArgs),
}

fn parse_budget(s: &str) -> std::result::Result<f64, String> {
    extended_float::parse(s).ok_or_else(|| format!("`{s}` is not a number or `inf`"))
}

/// Flags that override fields of the experiment config.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Saved split from `ingest`; skips filtering and splitting.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, value_parser = parse_budget)]
    epsilon1: Option<f64>,
    #[arg(long, value_parser = parse_budget)]
    epsilon2: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Aggregation steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Embedding row-norm bound C.
    #[arg(long)]
    embed_norm: Option<f64>,
    #[arg(long)]
    item_dim: Option<usize>,
    #[arg(long)]
    user_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long)]
    exclude_seen: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds; several may be given separated by commas.
    #[arg(long, required = true, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Users and items with fewer interactions are removed; 0 disables.
    #[arg(long, default_value_t = 10)]
    min_count: usize,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Seed of the validation hold-out.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrateMethod {
    Dipsgnn,
    Edgerand,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_parser = parse_budget)]
    epsilon2: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    embed_norm: f64,
    /// EdgeRand calibrates one release with unit sensitivity.
    #[arg(long, value_enum, default_value = "dipsgnn")]
    method: CalibrateMethod,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PlantedMarkov,
    Cycle,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "planted-markov")]
    kind: KindArg,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    items: usize,
    #[arg(long, default_value_t = 30)]
    length: usize,
    #[arg(long, default_value_t = 0.8)]
    follow_prob: f64,
    /// Item groups of the planted rule.
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn build_config(args: &ConfigArgs, seeds: &[u64]) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.interactions {
        cfg.data.interactions = Some(p.clone());
        cfg.synthetic = None;
    }
    if let Some(p) = &args.features {
        cfg.data.features = Some(p.clone());
    }
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    if let Some(v) = args.epsilon1 {
        cfg.privacy.epsilon1 = v;
        cfg.sweep.epsilon1.clear();
    }
    if let Some(v) = args.epsilon2 {
        cfg.privacy.epsilon2 = v;
        cfg.sweep.epsilon2.clear();
    }
    if args.delta.is_some() {
        cfg.privacy.delta = args.delta;
    }
    if let Some(v) = args.steps {
        cfg.model.steps = v;
        cfg.sweep.steps.clear();
    }
    if let Some(v) = args.embed_norm {
        cfg.model.embed_norm = v;
        cfg.sweep.embed_norm.clear();
    }
    if let Some(v) = args.item_dim {
        cfg.model.item_dim = v;
    }
    if let Some(v) = args.user_dim {
        cfg.model.user_dim = v;
    }
    if let Some(v) = args.epochs {
        cfg.training.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.training.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.training.batch_size = v;
    }
    if !args.ks.is_empty() {
        cfg.eval.ks = args.ks.clone();
    }
    if args.exclude_seen {
        cfg.eval.exclude_seen = true;
    }
    cfg.seeds = seeds.to_vec();
    cfg.validate()?;
    Ok(cfg)
}

fn prepared(args: &ConfigArgs, cfg: &ExperimentConfig) -> Result<experiment::PreparedData> {
    match &args.split {
        None => prepare(cfg),
        Some(path) => {
            let split = SplitDataset::load(path)?;
            let schema = if cfg.schema.is_empty() { None } else { Some(FeatureSchema::new(cfg.schema.clone())?) };
            let table = match &cfg.data.features {
                Some(p) if schema.is_some() => Some(read_feature_file(p, cfg.delimiter())?),
                _ => None,
            };
            prepare_split(split, schema, table.as_ref(), cfg.privacy.delta)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in log {
        let line = serde_json::to_string(record).map_err(|e| Error::parse(path, e))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ingest(args: &IngestArgs) -> Result<()> {
    if !args.delimiter.is_ascii() {
        return Err(Error::Config("delimiter must be ASCII".into()));
    }
    let log = read_interactions(&args.interactions, args.delimiter as u8)?;
    let raw = log.len();
    let log = if args.min_count > 0 { core_filter(&log, args.min_count) } else { log };
    let config = dipsgnn_core::graph_pipeline::SplitConfig {
        train_frac: args.train_frac,
        valid_frac: args.valid_frac,
        max_len: args.max_len,
        seed: args.seed,
    };
    let split = chronological_split(&log, &config)?;
    create_dir(&args.out_dir)?;
    split.save(&args.out_dir.join("split.json"))?;
    let summary = json!({
        "interactions": raw,
        "kept": log.len(),
        "users": split.users.len(),
        "items": split.items.len(),
        "edges": split.num_edges(),
        "train": split.train.len(),
        "valid": split.valid.len(),
        "test": split.test.len(),
    });
    write_json(&args.out_dir.join("ingest.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let spec = match args.method {
        CalibrateMethod::Dipsgnn => PrivacySpec::calibrated(f64::INFINITY, args.epsilon2, args.delta, args.steps, args.embed_norm)?,
        CalibrateMethod::Edgerand => edgerand_spec(f64::INFINITY, args.epsilon2, args.delta)?,
    };
    let record = json!({
        "epsilon2": serde_json::to_value(BudgetValue(spec.epsilon2)).expect("serializable"),
        "delta": spec.delta,
        "T": spec.steps,
        "C": spec.embed_norm,
        "sigma": spec.sigma,
    });
    println!("{record}");
    Ok(())
}

#[derive(serde::Serialize)]
struct BudgetValue(#[serde(with = "extended_float")] f64);

fn single_cell(cfg: &ExperimentConfig, seed: u64) -> Cell {
    let method = cfg.methods[0];
    let (e1, e2) = if method == Method::Nonprivate {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (cfg.privacy.epsilon1, cfg.privacy.epsilon2)
    };
    Cell { method, epsilon1: e1, epsilon2: e2, steps: cfg.model.steps, embed_norm: cfg.model.embed_norm, seed }
}

fn provenance(cfg: &ExperimentConfig, data: &experiment::PreparedData) -> Result<Provenance> {
    Ok(Provenance {
        config_hash: cfg.hash()?,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        num_users: data.split.users.len(),
        num_items: data.num_items(),
        num_edges: data.split.num_edges(),
        samples: [data.samples[0].len(), data.samples[1].len(), data.samples[2].len()],
        delta: data.delta,
        cells: Vec::new(),
    })
}

fn cell_provenance(r: &experiment::CellResult) -> dipsgnn_core::eval::report::CellProvenance {
    dipsgnn_core::eval::report::CellProvenance {
        cell: r.cell,
        privacy: r.privacy,
        sigma: r.sigma,
        noisy_passes: r.noisy_passes,
        epsilon2_recomputed: r.privacy.recomputed_epsilon2(),
    }
}

fn train_cmd(args: &RunArgs) -> Result<()> {
    let cfg = build_config(&args.config, &args.seed)?;
    let data = prepared(&args.config, &cfg)?;
    create_dir(&args.out_dir)?;
    let mut rows = Vec::new();
    let mut prov = provenance(&cfg, &data)?;
    for &seed in &args.seed {
        let cell = single_cell(&cfg, seed);
        let result = run_cell(&cfg, &data, &cell)?;
        let mut ck = Checkpoint::new(
            cell.method.name(),
            result.privacy,
            experiment::train_config(&cfg, &cell, 0.0).forward,
            if cell.method == Method::Dipsgnn { result.sigma } else { 0.0 },
            result.params.clone(),
        );
        ck.items = data.split.items.ids().to_vec();
        ck.epochs = result.epochs;
        ck.save(&args.out_dir.join(format!("checkpoint_seed{seed}.json")))?;
        write_log(&args.out_dir.join(format!("train_log_seed{seed}.jsonl")), &result.log)?;
        rows.extend(experiment::report_rows(&result));
        prov.cells.push(cell_provenance(&result));
        eprintln!("seed {seed}: sigma = {}, noisy passes = {}", result.sigma, result.noisy_passes);
    }
    let report = EvalReport { rows, provenance: prov };
    report.write_all(&args.out_dir)?;
    fs::write(args.out_dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&args.out_dir, e))?;
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = build_config(&args.config, &[args.seed])?;
    cfg.methods = vec![ck.method.parse()?];
    cfg.model.steps = ck.forward.steps;
    cfg.model.embed_norm = ck.forward.embed_norm;
    cfg.model.loss = ck.forward.loss;
    cfg.privacy.epsilon1 = ck.privacy.epsilon1;
    cfg.privacy.epsilon2 = ck.privacy.epsilon2;
    let data = prepared(&args.config, &cfg)?;
    if data.num_items() != ck.params.dims.num_items || (!ck.items.is_empty() && ck.items != data.split.items.ids()) {
        return Err(Error::Config("checkpoint items do not match the dataset".into()));
    }
    let cell = single_cell(&cfg, args.seed);
    let (privacy, _) = cell_privacy(&cell, ck.privacy.delta)?;
    let features = cell_features(&data, &cell, &privacy)?;
    let samples = cell_samples(&data, 2, &cell, &privacy)?;
    let mut tcfg = experiment::train_config(&cfg, &cell, ck.sigma);
    tcfg.forward = ck.forward;
    let acc = evaluate(&ck.params, &features, &samples, &tcfg, evaluation_seed(&cell, 2))?;
    let result = experiment::CellResult {
        cell,
        privacy,
        sigma: if cell.method == Method::Edgerand { privacy.sigma } else { ck.sigma },
        epochs: if ck.epochs > 0 { ck.epochs } else { cfg.training.epochs },
        metrics: [None, None, Some(acc)],
        noisy_passes: if ck.sigma > 0.0 { samples.len() } else { 0 },
        log: Vec::new(),
        params: ck.params.clone(),
    };
    let mut prov = provenance(&cfg, &data)?;
    prov.cells.push(cell_provenance(&result));
    let report = EvalReport { rows: experiment::report_rows(&result), provenance: prov };
    create_dir(&args.out_dir)?;
    report.write_all(&args.out_dir)?;
    for r in &report.rows {
        println!("{} {}@{} = {:.4}", r.split, r.metric, r.k, r.value);
    }
    Ok(())
}

fn sweep_cmd(args: &RunArgs) -> Result<()> {
    let cfg = build_config(&args.config, &args.seed)?;
    create_dir(&args.out_dir)?;
    let (report, results) = if args.config.split.is_some() {
        let data = prepared(&args.config, &cfg)?;
        let results = experiment::cells(&cfg)
            .iter()
            .map(|c| run_cell(&cfg, &data, c))
            .collect::<Result<Vec<_>>>()?;
        let mut prov = provenance(&cfg, &data)?;
        prov.cells = results.iter().map(cell_provenance).collect();
        let rows = results.iter().flat_map(experiment::report_rows).collect();
        (EvalReport { rows, provenance: prov }, results)
    } else {
        experiment::run_experiment_detailed(&cfg)?
    };
    report.write_all(&args.out_dir)?;
    let logs = args.out_dir.join("logs");
    create_dir(&logs)?;
    for r in &results {
        write_log(&logs.join(format!("{}.jsonl", r.cell.label())), &r.log)?;
    }
    fs::write(args.out_dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&args.out_dir, e))?;
    for s in report.summary().iter().filter(|s| s.split == "test" && s.metric == "recall") {
        println!(
            "{:<10} eps1={:<5} eps2={:<5} T={} C={} recall@{:<2} = {:7.3} ± {:.3} ({} seeds)",
            s.method, s.epsilon1, s.epsilon2, s.steps, s.embed_norm, s.k, s.mean, s.std, s.seeds
        );
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let syn = SyntheticConfig {
        kind: match args.kind {
            KindArg::PlantedMarkov => SyntheticKind::PlantedMarkov,
            KindArg::Cycle => SyntheticKind::Cycle,
        },
        users: args.users,
        items: args.items,
        length: args.length,
        follow_prob: args.follow_prob,
        clusters: args.clusters,
        seed: args.seed,
    };
    let data = synthetic::generate(&syn)?;
    create_dir(&args.out_dir)?;
    write_interactions(&args.out_dir.join("interactions.csv"), &data.log, b',')?;
    write_feature_file(&args.out_dir.join("users.csv"), &data.schema, &data.features, b',')?;
    let mut cfg = ExperimentConfig::default();
    cfg.data.interactions = Some("interactions.csv".into());
    cfg.data.features = Some("users.csv".into());
    cfg.data.min_count = 0;
    cfg.schema = data.schema.entries().to_vec();
    let path = args.out_dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
