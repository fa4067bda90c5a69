//! Experiment harness behind the CLI: config validation and hashing, single
//! runs, ablation sweeps, the noise-robustness sweep, and the decomposition
//! verification driver. Sweep cells run in parallel; each owns its state.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{self, KeyPath, VerificationRun};
use crate::ar::ArMode;
use crate::data::{self, NoiseSpec, Sample};
use crate::model::{hex, Model};
use crate::prompts::{count_learnable_params, ParamBreakdown, Structure, StructureSpec};
use crate::rng::mix_seed;
use crate::train::{train, RunMetrics, TrainConfig};
use crate::vit::ModelConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Pattern,
    Count,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Base seed for generation; train and eval splits derive their own
    /// streams from it.
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    #[serde(default)]
    pub train_manifest: Option<String>,
    #[serde(default)]
    pub eval_manifest: Option<String>,
}

fn default_task() -> TaskKind {
    TaskKind::Pattern
}
fn default_n_train() -> usize {
    512
}
fn default_n_eval() -> usize {
    256
}
fn default_data_seed() -> u64 {
    42
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task: TaskKind::Pattern,
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            seed: default_data_seed(),
            train_manifest: None,
            eval_manifest: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub adapt: StructureSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Apply the noise spec to the training split as well (off by default:
    /// the robustness protocol corrupts evaluation only).
    #[serde(default)]
    pub corrupt_train: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Run seeds; when absent, the IVPT_SEED env var (or {0, 1, 2}) applies.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 16x16 images, patch 4, D=32, 4 heads, 4 layers,
    /// N=4 prompts, top-2 AR, 4-class pattern task.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk_default(),
            train: TrainConfig::default(),
            adapt: StructureSpec {
                structure: Structure::Cdc,
                da: true,
                gamma_init: crate::prompts::GammaInit::Identity,
                prompts: 4,
                ar: ArMode::TopK,
                ar_k: 2,
                ar_layers: None,
            },
            dataset: DatasetSpec::default(),
            noise: NoiseSpec::default(),
            corrupt_train: false,
            out_dir: None,
            seeds: None,
        }
    }

    /// Seeds to run, defaulting to {0, 1, 2} when the config names none.
    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0, 1, 2])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate(&self.model)?;
        self.noise.validate()?;
        match self.dataset.task {
            TaskKind::Pattern => {
                if !(2..=8).contains(&self.model.num_classes) {
                    return Err(Error::config(
                        "pattern task needs 2..=8 classes in the model config",
                    ));
                }
            }
            TaskKind::Count => {
                if self.model.num_classes < 2 {
                    return Err(Error::config("count task needs at least 2 classes"));
                }
            }
            TaskKind::Manifest => {
                if self.dataset.train_manifest.is_none() || self.dataset.eval_manifest.is_none() {
                    return Err(Error::config(
                        "manifest task needs train_manifest and eval_manifest paths",
                    ));
                }
            }
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            return Err(Error::config("need at least one seed"));
        }
        Ok(())
    }
}

/// Canonical JSON: sorted keys, no whitespace (serde_json maps are ordered).
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Stable digest of the canonicalized config. The output directory is not
/// semantically meaningful and is excluded.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut stripped = cfg.clone();
    stripped.out_dir = None;
    let canon = canonical_json(&stripped)?;
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    Ok(hex(&hasher.finalize())[..16].to_string())
}

/// Generates or loads the (train, eval) splits.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let m = &cfg.model;
    let ds = &cfg.dataset;
    match ds.task {
        TaskKind::Pattern => Ok((
            data::gen_pattern_task(ds.n_train, m.num_classes, m.image_height, m.image_width, mix_seed(ds.seed, 0))?,
            data::gen_pattern_task(ds.n_eval, m.num_classes, m.image_height, m.image_width, mix_seed(ds.seed, 1))?,
        )),
        TaskKind::Count => Ok((
            data::gen_count_task(ds.n_train, m.num_classes - 1, m.image_height, m.image_width, mix_seed(ds.seed, 0))?,
            data::gen_count_task(ds.n_eval, m.num_classes - 1, m.image_height, m.image_width, mix_seed(ds.seed, 1))?,
        )),
        TaskKind::Manifest => {
            let load = |p: &str| {
                data::load_raw_dataset(Path::new(p), m.image_height, m.image_width, m.channels, m.num_classes)
            };
            Ok((
                load(ds.train_manifest.as_deref().expect("validated"))?,
                load(ds.eval_manifest.as_deref().expect("validated"))?,
            ))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub structure: String,
    pub da: bool,
    pub ar: String,
    pub ar_k: usize,
    pub seed: u64,
    pub final_top1: f64,
    pub params: ParamBreakdown,
    pub metrics_path: Option<String>,
}

pub struct RunOutcome {
    pub record: ResultRecord,
    pub metrics: RunMetrics,
    pub model: Model,
}

/// Metrics JSONL (one line per epoch, no wall-clock fields, byte-stable).
pub fn metrics_jsonl(metrics: &RunMetrics) -> String {
    let mut out = String::new();
    for e in &metrics.per_epoch {
        out.push_str(&serde_json::to_string(e).expect("epoch metrics serialize"));
        out.push('\n');
    }
    out
}

/// One (config, seed) training run: bank seeded by `seed`, shuffle stream
/// seeded by `seed`, datasets from the dataset spec.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let (mut train_set, mut eval_set) = build_datasets(cfg)?;
    if cfg.noise.rho > 0.0 {
        if cfg.corrupt_train {
            train_set = data::corrupt_all(&train_set, &cfg.noise)?;
        }
        eval_set = data::corrupt_all(&eval_set, &cfg.noise)?;
    }
    let mut model = Model::build(cfg.model.clone(), &cfg.adapt, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let metrics = train(&mut model, &train_set, &eval_set, &tc)?;

    let hash = config_hash(cfg)?;
    let metrics_path = match &cfg.out_dir {
        Some(dir) => {
            let subdir = PathBuf::from(dir).join(&hash);
            std::fs::create_dir_all(&subdir).map_err(|e| Error::io(subdir.display().to_string(), e))?;
            let path = subdir.join(format!("metrics_seed{seed}.jsonl"));
            std::fs::write(&path, metrics_jsonl(&metrics))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some(path.display().to_string())
        }
        None => None,
    };

    let record = ResultRecord {
        config_hash: hash,
        structure: cfg.adapt.structure.name().to_string(),
        da: cfg.adapt.da,
        ar: cfg.adapt.ar.name().to_string(),
        ar_k: model.bank.k,
        seed,
        final_top1: metrics.final_top1,
        params: count_learnable_params(&cfg.model, &model.bank),
        metrics_path,
    };
    Ok(RunOutcome { record, metrics, model })
}

// ── ablation sweep ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateAxis {
    Structure,
    Da,
    Ar,
}

impl AblateAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(AblateAxis::Structure),
            "da" => Ok(AblateAxis::Da),
            "ar" => Ok(AblateAxis::Ar),
            other => Err(Error::config(format!("invalid ablation axis '{other}'"))),
        }
    }
}

/// The compared prompt structures (the output-preserving ones, the running
/// sums, and the per-layer baseline).
pub const ABLATE_STRUCTURES: [Structure; 5] = [
    Structure::VptDeep,
    Structure::Provp,
    Structure::Express,
    Structure::VanillaCdc,
    Structure::Cdc,
];

pub const ABLATE_AR_MODES: [ArMode; 3] = [ArMode::None, ArMode::All, ArMode::TopK];

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub structure: String,
    pub da: bool,
    pub ar: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
}

pub struct AblateOutcome {
    pub runs: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
}

fn cell_configs(cfg: &ExperimentConfig, axes: &[AblateAxis]) -> Result<Vec<ExperimentConfig>> {
    let structures: Vec<Structure> = if axes.contains(&AblateAxis::Structure) {
        ABLATE_STRUCTURES.to_vec()
    } else {
        vec![cfg.adapt.structure]
    };
    let das: Vec<bool> = if axes.contains(&AblateAxis::Da) {
        if cfg.adapt.structure != Structure::Cdc {
            return Err(Error::config("the da axis needs the cdc base structure"));
        }
        vec![false, true]
    } else {
        vec![cfg.adapt.da]
    };
    let ars: Vec<ArMode> = if axes.contains(&AblateAxis::Ar) {
        ABLATE_AR_MODES.to_vec()
    } else {
        vec![cfg.adapt.ar]
    };

    let mut cells = Vec::new();
    for &structure in &structures {
        for &da in &das {
            for &ar in &ars {
                let mut c = cfg.clone();
                c.adapt.structure = structure;
                c.adapt.da = da && structure == Structure::Cdc;
                c.adapt.ar = ar;
                if ar == ArMode::TopK && c.adapt.ar_k == 0 {
                    c.adapt.ar_k = 2.min(c.model.num_patches());
                }
                cells.push(c);
            }
        }
    }
    Ok(cells)
}

/// Cartesian sweep over the requested axes and the config's seeds; row count
/// of `runs` is (product of axis sizes) x (number of seeds).
pub fn run_ablate(cfg: &ExperimentConfig, axes: &[AblateAxis]) -> Result<AblateOutcome> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let cells = cell_configs(cfg, axes)?;
    let jobs: Vec<(usize, ExperimentConfig, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| seeds.iter().map(move |&s| (i, c.clone(), s)).collect::<Vec<_>>())
        .collect();
    let mut results: Vec<(usize, u64, ResultRecord)> = jobs
        .into_par_iter()
        .map(|(i, c, s)| run_single(&c, s).map(|o| (i, s, o.record)))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|(i, s, _)| (*i, *s));

    let mut summary = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let accs: Vec<f64> = results
            .iter()
            .filter(|(ci, _, _)| *ci == i)
            .map(|(_, _, r)| r.final_top1)
            .collect();
        let (mean, std) = mean_std(&accs);
        summary.push(SummaryRow {
            structure: cell.adapt.structure.name().to_string(),
            da: cell.adapt.da,
            ar: cell.adapt.ar.name().to_string(),
            mean_acc: mean,
            std_acc: std,
            n_seeds: accs.len(),
        });
    }
    Ok(AblateOutcome {
        runs: results.into_iter().map(|(_, _, r)| r).collect(),
        summary,
    })
}

pub fn ablate_runs_csv(runs: &[ResultRecord]) -> String {
    let mut out = String::from("structure,da,ar,ar_k,seed,final_top1,params_total\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.structure, r.da, r.ar, r.ar_k, r.seed, r.final_top1, r.params.total
        ));
    }
    out
}

pub fn ablate_summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("structure,da,ar,mean_acc,std_acc,n_seeds\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.structure, s.da, s.ar, s.mean_acc, s.std_acc, s.n_seeds
        ));
    }
    out
}

// ── noise-robustness sweep ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct NoiseRow {
    pub structure: String,
    pub rho: f64,
    pub seed: u64,
    pub acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseSummary {
    pub structure: String,
    pub rho: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub struct NoiseSweepOutcome {
    pub rows: Vec<NoiseRow>,
    pub summary: Vec<NoiseSummary>,
    /// Spearman rank correlation of accuracy against rho, per structure.
    pub spearman: Vec<(String, f64)>,
}

/// Trains each (structure, seed) cell once on clean data and evaluates at
/// every rho on the corrupted eval split. With `corrupt_train` set in the
/// config, training is repeated per rho on corrupted training data.
pub fn run_noise_sweep(
    cfg: &ExperimentConfig,
    rhos: &[f64],
    structures: &[Structure],
) -> Result<NoiseSweepOutcome> {
    cfg.validate()?;
    for &rho in rhos {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::config(format!("rho {rho} outside [0, 1]")));
        }
    }
    let seeds = cfg.seed_list();
    let cells: Vec<(Structure, u64)> = structures
        .iter()
        .flat_map(|&st| seeds.iter().map(move |&s| (st, s)).collect::<Vec<_>>())
        .collect();

    let mut rows: Vec<NoiseRow> = cells
        .into_par_iter()
        .map(|(structure, seed)| -> Result<Vec<NoiseRow>> {
            let mut c = cfg.clone();
            c.adapt.structure = structure;
            c.adapt.da = c.adapt.da && structure == Structure::Cdc;
            c.noise.rho = 0.0;
            let mut out = Vec::with_capacity(rhos.len());
            if cfg.corrupt_train {
                for &rho in rhos {
                    let mut cr = c.clone();
                    cr.noise.rho = rho;
                    cr.corrupt_train = true;
                    let run = run_single(&cr, seed)?;
                    out.push(NoiseRow {
                        structure: structure.name().to_string(),
                        rho,
                        seed,
                        acc: run.record.final_top1,
                    });
                }
            } else {
                let run = run_single(&c, seed)?;
                let (_, eval_set) = build_datasets(&c)?;
                for &rho in rhos {
                    let spec = NoiseSpec { rho, ..cfg.noise };
                    let eval = data::corrupt_all(&eval_set, &spec)?;
                    let acc = run.model.eval_accuracy(&eval)?;
                    out.push(NoiseRow {
                        structure: structure.name().to_string(),
                        rho,
                        seed,
                        acc,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by(|a, b| {
        (a.structure.as_str(), a.seed)
            .cmp(&(b.structure.as_str(), b.seed))
            .then(a.rho.total_cmp(&b.rho))
    });

    let mut summary = Vec::new();
    let mut spearman = Vec::new();
    for &structure in structures {
        let name = structure.name();
        for &rho in rhos {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.structure == name && r.rho == rho)
                .map(|r| r.acc)
                .collect();
            let (mean, std) = mean_std(&accs);
            summary.push(NoiseSummary {
                structure: name.to_string(),
                rho,
                mean_acc: mean,
                std_acc: std,
            });
        }
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.structure == name)
            .map(|r| (r.rho, r.acc))
            .collect();
        spearman.push((name.to_string(), spearman_rho(&pairs)));
    }
    Ok(NoiseSweepOutcome { rows, summary, spearman })
}

pub fn noise_rows_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("structure,rho,seed,acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.structure, r.rho, r.seed, r.acc));
    }
    out
}

pub fn noise_summary_csv(rows: &[NoiseSummary]) -> String {
    let mut out = String::from("structure,rho,mean_acc,std_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.structure, r.rho, r.mean_acc, r.std_acc));
    }
    out
}

// ── verification driver ──────────────────────────────────────────────

pub struct VerifyOutcome {
    pub at_init: VerificationRun,
    pub after_training: VerificationRun,
    pub ln_path: VerificationRun,
    pub pass: bool,
    pub report: serde_json::Value,
}

/// Decomposition checks on a freshly initialized model and on the same model
/// after `brief_epochs` of training (LN-bypassed key path); the full-LN run
/// is attached as documentation and does not affect `pass`.
pub fn run_verify(cfg: &ExperimentConfig, brief_epochs: usize, tolerance: f64) -> Result<VerifyOutcome> {
    cfg.validate()?;
    if cfg.adapt.structure != Structure::Cdc {
        return Err(Error::config("verify needs the cdc structure"));
    }
    let (train_set, eval_set) = build_datasets(cfg)?;
    let image = &eval_set
        .first()
        .ok_or_else(|| Error::config("verify needs a non-empty eval split"))?
        .image;

    let seed = *cfg.seed_list().first().unwrap_or(&0);
    let mut model = Model::build(cfg.model.clone(), &cfg.adapt, seed)?;
    let at_init = analysis::verify_model(&model, image, tolerance, KeyPath::LnBypassed)?;

    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.epochs_total = brief_epochs;
    tc.warmup_epochs = tc.warmup_epochs.min(brief_epochs.saturating_sub(1));
    if brief_epochs > 0 {
        train(&mut model, &train_set, &eval_set, &tc)?;
    }
    let after_training = analysis::verify_model(&model, image, tolerance, KeyPath::LnBypassed)?;
    let ln_path = analysis::verify_model(&model, image, tolerance, KeyPath::FullLn)?;

    let pass = at_init.all_pass() && after_training.all_pass();
    let reports_json = |run: &VerificationRun| {
        json!({
            "cdc": run.cdc.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
            "da": run.da.iter().map(|r| r.to_json()).collect::<Vec<_>>(),
            "max_residual": run.max_residual(),
        })
    };
    let report = json!({
        "tolerance": tolerance,
        "pass": pass,
        "at_init": reports_json(&at_init),
        "after_training": reports_json(&after_training),
        "ln_path_informational": reports_json(&ln_path),
    });
    Ok(VerifyOutcome { at_init, after_training, ln_path, pass, report })
}

/// Parameter-count report: closed-form breakdown plus the registry scan.
pub fn params_report(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let model = Model::build(cfg.model.clone(), &cfg.adapt, *cfg.seed_list().first().unwrap_or(&0))?;
    let breakdown = count_learnable_params(&cfg.model, &model.bank);
    let registry = model.trainable_scalar_count();
    Ok(json!({
        "cdc": breakdown.cdc,
        "da": breakdown.da,
        "ar": breakdown.ar,
        "head": breakdown.head,
        "total": breakdown.total,
        "registry_total": registry,
        "formula_matches_registry": breakdown.total == registry,
    }))
}

// ── small statistics helpers ─────────────────────────────────────────

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len();
    if n < 2 {
        return 0.0;
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov = rx
        .iter()
        .zip(ry.iter())
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n as f64;
    cov / (sx * sy)
}
