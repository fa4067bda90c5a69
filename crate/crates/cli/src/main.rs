//! Experiment runner for the prompt-tuned ViT engine.
//!
//! Subcommands: train, verify, ablate, noise-sweep, attn-dump, params.
//! A JSON config (`--config`) provides the base experiment; individual flags
//! override it. Exit codes: 0 success, 2 config error, 3 verification
//! failure, 4 runtime/numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ivpt_core::analysis::DEFAULT_TOLERANCE;
use ivpt_core::ar::ArMode;
use ivpt_core::harness::{self, AblateAxis, ExperimentConfig, TaskKind};
use ivpt_core::prompts::{GammaInit, Structure};
use ivpt_core::snapshot;
use ivpt_core::{data::NoiseModel, Error};

#[derive(Parser)]
#[command(name = "ivpt", version, about = "Prompt-tuned ViT experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the selected structure for every seed; writes metrics and snapshots.
    Train(CommonArgs),
    /// Run the attention-decomposition checks at init and after brief training.
    Verify(VerifyArgs),
    /// Cartesian sweep over the requested axes (structure, da, ar).
    Ablate(AblateArgs),
    /// Train per structure, evaluate under increasing Gaussian corruption.
    NoiseSweep(NoiseArgs),
    /// Export per-layer class-token attention over image tokens as CSV.
    AttnDump(AttnDumpArgs),
    /// Report the learnable-parameter breakdown and registry check.
    Params(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Prompt structure.
    #[arg(long, value_parser = Structure::parse)]
    structure: Option<Structure>,

    /// Dynamic aggregation on the cdc structure.
    #[arg(long, value_parser = parse_on_off)]
    da: Option<bool>,

    /// gamma init: identity, zero, or uniform.
    #[arg(long, value_parser = parse_gamma_init)]
    gamma_init: Option<GammaInit>,

    /// Prompt count N.
    #[arg(long)]
    prompts: Option<usize>,

    /// Attentive reinforcement mode: none, all, topk.
    #[arg(long, value_parser = ArMode::parse)]
    ar: Option<ArMode>,

    /// Top-k size for ar=topk.
    #[arg(long)]
    ar_k: Option<usize>,

    /// Comma-separated layer subset AR applies to (default: all layers).
    #[arg(long, value_delimiter = ',')]
    ar_layers: Option<Vec<usize>>,

    /// Synthetic task: pattern, count, or manifest.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,

    /// Training-set size.
    #[arg(long)]
    n: Option<usize>,

    /// Eval-set size.
    #[arg(long)]
    n_eval: Option<usize>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    base_lr: Option<f64>,

    /// Comma-separated run seeds. IVPT_SEED supplies the default when unset.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Gaussian corruption rate applied to the eval split.
    #[arg(long)]
    noise_rho: Option<f64>,

    /// Corruption model: blend or additive.
    #[arg(long, value_parser = parse_noise_model)]
    noise_model: Option<NoiseModel>,

    /// Also corrupt the training split.
    #[arg(long)]
    corrupt_train: bool,

    /// Output directory for machine-readable artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Max concurrent sweep cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Epochs of brief training before the second check.
    #[arg(long, default_value_t = 20)]
    train_epochs: usize,

    /// Relative residual tolerance.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Axes to sweep, comma-separated subset of structure,da,ar.
    #[arg(long, value_delimiter = ',')]
    axes: Vec<String>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Corruption rates to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6])]
    rhos: Vec<f64>,

    /// Structures to compare.
    #[arg(long, value_delimiter = ',', value_parser = Structure::parse,
          default_values_t = [Structure::Cdc, Structure::Express])]
    structures: Vec<Structure>,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Load a trained model snapshot (base path without extension) instead of
    /// a fresh init.
    #[arg(long)]
    snapshot: Option<PathBuf>,

    /// Which eval sample to run.
    #[arg(long, default_value_t = 0)]
    sample_index: usize,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on/off, got '{other}'")),
    }
}

fn parse_gamma_init(s: &str) -> Result<GammaInit, String> {
    match s {
        "identity" => Ok(GammaInit::Identity),
        "zero" => Ok(GammaInit::Zero),
        "uniform" => Ok(GammaInit::Uniform),
        other => Err(format!("expected identity/zero/uniform, got '{other}'")),
    }
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "pattern" => Ok(TaskKind::Pattern),
        "count" => Ok(TaskKind::Count),
        "manifest" => Ok(TaskKind::Manifest),
        other => Err(format!("expected pattern/count/manifest, got '{other}'")),
    }
}

fn parse_noise_model(s: &str) -> Result<NoiseModel, String> {
    match s {
        "blend" => Ok(NoiseModel::Blend),
        "additive" => Ok(NoiseModel::Additive),
        other => Err(format!("expected blend/additive, got '{other}'")),
    }
}

/// defaults < config file < IVPT_SEED (seeds only) < flags
fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::desk_default(),
    };

    if cfg.seeds.is_none() {
        if let Ok(v) = std::env::var("IVPT_SEED") {
            let seed: u64 = v
                .parse()
                .map_err(|_| Error::config(format!("IVPT_SEED '{v}' is not an integer")))?;
            cfg.seeds = Some(vec![seed]);
        }
    }

    if let Some(s) = args.structure {
        cfg.adapt.structure = s;
    }
    if let Some(da) = args.da {
        cfg.adapt.da = da;
    }
    if let Some(g) = args.gamma_init {
        cfg.adapt.gamma_init = g;
    }
    if let Some(n) = args.prompts {
        cfg.adapt.prompts = n;
    }
    if let Some(ar) = args.ar {
        cfg.adapt.ar = ar;
    }
    if let Some(k) = args.ar_k {
        cfg.adapt.ar_k = k;
    }
    if let Some(layers) = &args.ar_layers {
        cfg.adapt.ar_layers = Some(layers.clone());
    }
    if let Some(t) = args.task {
        cfg.dataset.task = t;
    }
    if let Some(n) = args.n {
        cfg.dataset.n_train = n;
    }
    if let Some(n) = args.n_eval {
        cfg.dataset.n_eval = n;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs_total = e;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.base_lr {
        cfg.train.base_lr = lr;
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = Some(seeds.clone());
    }
    if let Some(rho) = args.noise_rho {
        cfg.noise.rho = rho;
    }
    if let Some(m) = args.noise_model {
        cfg.noise.model = m;
    }
    if args.corrupt_train {
        cfg.corrupt_train = true;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.display().to_string());
    }

    if let Some(jobs) = args.jobs {
        // best effort: the global pool can only be initialised once
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_artifact(out_dir: Option<&str>, name: &str, contents: &str) -> Result<Option<PathBuf>, Error> {
    let Some(dir) = out_dir else { return Ok(None) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_string(), e))?;
    let path = Path::new(dir).join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(Some(path))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<i32, Error> {
    let hash = harness::config_hash(cfg)?;
    println!(
        "config {hash}: structure={} da={} ar={}",
        cfg.adapt.structure.name(),
        cfg.adapt.da,
        cfg.adapt.ar.name()
    );
    let mut records = Vec::new();
    for seed in cfg.seed_list() {
        let outcome = harness::run_single(cfg, seed)?;
        println!(
            "seed {seed}: final top-1 {:.4} ({} trainable params, {:.1}s)",
            outcome.metrics.final_top1,
            outcome.metrics.learnable_params,
            outcome.metrics.wall_seconds
        );
        if let Some(dir) = &cfg.out_dir {
            let base = Path::new(dir).join(&hash).join(format!("model_seed{seed}"));
            snapshot::save(&outcome.model, &cfg.adapt, &base)?;
        }
        records.push(outcome.record);
    }
    let json = serde_json::to_string_pretty(&records)?;
    if let Some(path) = write_artifact(cfg.out_dir.as_deref(), "train_results.json", &json)? {
        println!("results: {}", path.display());
    }
    Ok(0)
}

fn cmd_verify(cfg: &ExperimentConfig, args: &VerifyArgs) -> Result<i32, Error> {
    let out = harness::run_verify(cfg, args.train_epochs, args.tolerance)?;
    println!(
        "decomposition checks at tolerance {:.1e}: init max residual {:.3e}, trained max residual {:.3e}",
        args.tolerance,
        out.at_init.max_residual(),
        out.after_training.max_residual()
    );
    println!(
        "full-LN path (informational): max residual {:.3e}",
        out.ln_path.max_residual()
    );
    let json = serde_json::to_string_pretty(&out.report)?;
    if let Some(path) = write_artifact(cfg.out_dir.as_deref(), "verify.json", &json)? {
        println!("report: {}", path.display());
    }
    if out.pass {
        println!("verify: PASS");
        Ok(0)
    } else {
        let failing = out
            .at_init
            .cdc
            .iter()
            .chain(&out.at_init.da)
            .chain(&out.after_training.cdc)
            .chain(&out.after_training.da)
            .filter(|r| !r.pass);
        for rep in failing {
            eprintln!(
                "FAIL layer {} head {}: max residual {:.3e}",
                rep.layer,
                rep.head,
                rep.max_residual()
            );
        }
        Ok(3)
    }
}

fn cmd_ablate(cfg: &ExperimentConfig, args: &AblateArgs) -> Result<i32, Error> {
    let axes = args
        .axes
        .iter()
        .map(|s| AblateAxis::parse(s))
        .collect::<Result<Vec<_>, _>>()?;
    let out = harness::run_ablate(cfg, &axes)?;
    println!("structure        da     ar     mean_acc  std_acc  seeds");
    for s in &out.summary {
        println!(
            "{:<16} {:<6} {:<6} {:.4}    {:.4}   {}",
            s.structure, s.da, s.ar, s.mean_acc, s.std_acc, s.n_seeds
        );
    }
    write_artifact(cfg.out_dir.as_deref(), "ablate_runs.csv", &harness::ablate_runs_csv(&out.runs))?;
    if let Some(path) = write_artifact(
        cfg.out_dir.as_deref(),
        "ablate_summary.csv",
        &harness::ablate_summary_csv(&out.summary),
    )? {
        println!("tables: {} (+ ablate_runs.csv)", path.display());
    }
    Ok(0)
}

fn cmd_noise_sweep(cfg: &ExperimentConfig, args: &NoiseArgs) -> Result<i32, Error> {
    let out = harness::run_noise_sweep(cfg, &args.rhos, &args.structures)?;
    println!("structure        rho    mean_acc  std_acc");
    for s in &out.summary {
        println!("{:<16} {:.2}   {:.4}    {:.4}", s.structure, s.rho, s.mean_acc, s.std_acc);
    }
    for (structure, rho) in &out.spearman {
        println!("spearman(acc, rho) for {structure}: {rho:.3}");
    }
    write_artifact(cfg.out_dir.as_deref(), "noise_runs.csv", &harness::noise_rows_csv(&out.rows))?;
    if let Some(path) = write_artifact(
        cfg.out_dir.as_deref(),
        "noise_summary.csv",
        &harness::noise_summary_csv(&out.summary),
    )? {
        println!("tables: {} (+ noise_runs.csv)", path.display());
    }
    Ok(0)
}

fn cmd_attn_dump(cfg: &ExperimentConfig, args: &AttnDumpArgs) -> Result<i32, Error> {
    let model = match &args.snapshot {
        Some(base) => snapshot::load(base)?.0,
        None => ivpt_core::model::Model::build(
            cfg.model.clone(),
            &cfg.adapt,
            *cfg.seed_list().first().unwrap_or(&0),
        )?,
    };
    let (_, eval_set) = harness::build_datasets(cfg)?;
    let sample = eval_set
        .get(args.sample_index)
        .ok_or_else(|| Error::config(format!("sample index {} out of range", args.sample_index)))?;
    let rows = ivpt_core::analysis::export_attention(&model, &sample.image)?;
    let csv = ivpt_core::analysis::attention_csv(&rows);
    match write_artifact(cfg.out_dir.as_deref(), "attention.csv", &csv)? {
        Some(path) => println!("attention rows: {}", path.display()),
        None => print!("{csv}"),
    }
    Ok(0)
}

fn cmd_params(cfg: &ExperimentConfig) -> Result<i32, Error> {
    let report = harness::params_report(cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn run() -> Result<i32, Error> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train(common) => cmd_train(&resolve_config(common)?),
        Cmd::Verify(args) => cmd_verify(&resolve_config(&args.common)?, args),
        Cmd::Ablate(args) => cmd_ablate(&resolve_config(&args.common)?, args),
        Cmd::NoiseSweep(args) => cmd_noise_sweep(&resolve_config(&args.common)?, args),
        Cmd::AttnDump(args) => cmd_attn_dump(&resolve_config(&args.common)?, args),
        Cmd::Params(common) => cmd_params(&resolve_config(common)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Json(_) => 2,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}
