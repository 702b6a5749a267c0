//! Experiment configuration, run orchestration and the comparison report.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! data/domain1.mdmt  data/domain1.splits.json
//! data/domain2.mdmt  data/domain2.splits.json
//! runs/<strategy>_seed<N>/{config.json, metrics.jsonl, checkpoint.mdmt, report.json}
//! comparison.json  comparison.txt
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::container::sha256_hex;
use crate::datagen::{
    generate_domain, normalize_with_train_stats, read_dataset, split_counts, split_patientwise,
    write_dataset, DomainDataset, DomainSpec, Split, SplitManifest,
};
use crate::error::{Error, Result};
use crate::losses::DetectionLossConfig;
use crate::network::ArchConfig;
use crate::trainer::{
    auc_on, mean_dice, train_with_observer, AdamConfig, Domain2Usage, EpochRecord, Strategy,
    TrainConfig,
};

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Everything shared by the runs of one experiment. Strategy and seed are
/// filled in per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub zeta: f64,
    pub warmup_epochs: usize,
    pub pseudo_weight: f64,
    pub propagation_period: usize,
    pub detection_loss: DetectionLossConfig,
    pub domain2_usage: Domain2Usage,
}

impl TrainSettings {
    pub fn for_run(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            arch: self.arch.clone(),
            epochs: self.epochs,
            adam: self.adam,
            batch_size: self.batch_size,
            zeta: self.zeta,
            warmup_epochs: self.warmup_epochs,
            pseudo_weight: self.pseudo_weight,
            propagation_period: self.propagation_period,
            detection_loss: self.detection_loss,
            domain2_usage: self.domain2_usage,
            seed,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            arch: t.arch,
            epochs: t.epochs,
            adam: t.adam,
            batch_size: t.batch_size,
            zeta: t.zeta,
            warmup_epochs: t.warmup_epochs,
            pseudo_weight: t.pseudo_weight,
            propagation_period: t.propagation_period,
            detection_loss: t.detection_loss,
            domain2_usage: t.domain2_usage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub name: String,
    pub domain1: DomainSpec,
    pub domain2: DomainSpec,
    /// Train/val/test fractions.
    pub domain1_split: [f64; 3],
    pub domain2_split: [f64; 3],
    pub split_seed: u64,
    pub train: TrainSettings,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Not part of the config hash.
    pub output_dir: PathBuf,
}

pub const PRESETS: [&str; 2] = ["desk_default", "paper_scale_reference"];

impl ExperimentConfig {
    /// The synthetic benchmark. Domain 1 is oversized and mostly held out
    /// so test AUC is measured on enough scans to separate strategies.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_VERSION,
            name: "desk_default".into(),
            domain1: DomainSpec {
                n_patients: 200,
                metastatic_delta: 2.0,
                ..DomainSpec::desk_domain1()
            },
            domain2: DomainSpec {
                metastatic_delta: 2.0,
                ..DomainSpec::desk_domain2()
            },
            domain1_split: [0.2, 0.2, 0.6],
            domain2_split: [0.7, 0.15, 0.15],
            split_seed: 7,
            train: TrainSettings {
                epochs: 30,
                ..TrainSettings::default()
            },
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("mdmt_out"),
        }
    }

    /// The published protocol's sizes and hyperparameters. Documented for
    /// reference; far beyond a desk CPU budget.
    pub fn paper_scale_reference() -> Self {
        let arch = ArchConfig::paper_scale();
        let shape = arch.input_shape;
        let desk = Self::desk_default();
        ExperimentConfig {
            name: "paper_scale_reference".into(),
            domain1: DomainSpec {
                n_patients: 123,
                shape,
                blob_radius: [4.0, 12.0],
                ..desk.domain1
            },
            domain2: DomainSpec {
                n_patients: 85,
                shape,
                blob_radius: [4.0, 12.0],
                ..desk.domain2
            },
            domain1_split: [90.0 / 123.0, 10.0 / 123.0, 23.0 / 123.0],
            domain2_split: [62.0 / 85.0, 7.0 / 85.0, 16.0 / 85.0],
            train: TrainSettings {
                arch,
                epochs: 500,
                adam: AdamConfig {
                    lr: 0.05,
                    ..AdamConfig::default()
                },
                ..TrainSettings::default()
            },
            output_dir: PathBuf::from("mdmt_paper_scale"),
            ..desk
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk_default" => Ok(Self::desk_default()),
            "paper_scale_reference" => Ok(Self::paper_scale_reference()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "format_version: expected {CONFIG_VERSION}, got {}",
                self.format_version
            )));
        }
        for (field, spec, domain, fractions, split_field) in [
            ("domain1", &self.domain1, 1, self.domain1_split, "domain1_split"),
            ("domain2", &self.domain2, 2, self.domain2_split, "domain2_split"),
        ] {
            spec.validate().map_err(at(field))?;
            if spec.domain_id != domain {
                return Err(Error::config(format!("{field}.domain_id: must be {domain}")));
            }
            if spec.shape != self.train.arch.input_shape {
                return Err(Error::config(format!(
                    "{field}.shape: {:?} differs from train.arch.input_shape {:?}",
                    spec.shape, self.train.arch.input_shape
                )));
            }
            split_counts(spec.n_patients, fractions).map_err(at(split_field))?;
        }
        self.train
            .for_run(Strategy::SemiSupervisedMdmt, 0)
            .validate()
            .map_err(at("train"))?;
        if self.strategies.is_empty() {
            return Err(Error::config("strategies: list is empty"));
        }
        if self.strategies.iter().collect::<BTreeSet<_>>().len() != self.strategies.len() {
            return Err(Error::config("strategies: duplicate entry"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: list is empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds: duplicate entry"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field but `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut()
            .expect("config is an object")
            .remove("output_dir");
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::config(inner.to_string())
            } else {
                Error::config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), strip(&e))))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn dataset_path(&self, domain: u8) -> PathBuf {
        self.data_dir().join(format!("domain{domain}.mdmt"))
    }

    pub fn manifest_path(&self, domain: u8) -> PathBuf {
        self.data_dir().join(format!("domain{domain}.splits.json"))
    }

    pub fn run_dir(&self, strategy: Strategy, seed: u64) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(format!("{}_seed{seed}", strategy.name()))
    }

    fn spec(&self, domain: u8) -> (&DomainSpec, [f64; 3]) {
        match domain {
            1 => (&self.domain1, self.domain1_split),
            _ => (&self.domain2, self.domain2_split),
        }
    }
}

fn at(field: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::config(format!("{field}: {}", strip(&e)))
}

/// Message of a config error without the `config error: ` prefix, so
/// nested context reads naturally.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub format_version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub splits: SplitManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDomain {
    pub domain_id: u8,
    pub path: PathBuf,
    pub patients: usize,
    pub split_sizes: [usize; 3],
    pub positives: Option<usize>,
}

fn both_classes(ds: &DomainDataset, split: Split) -> Result<()> {
    let labels: BTreeSet<u8> = ds.records_in(split).iter().filter_map(|r| r.label).collect();
    if labels.len() < 2 {
        return Err(Error::config(format!(
            "domain1 {split} split holds a single class; change split_seed, domain1_split or domain1.positive_fraction"
        )));
    }
    Ok(())
}

/// Builds both normalized, split datasets in memory.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<[DomainDataset; 2]> {
    let hash = cfg.hash();
    let build = |domain: u8| -> Result<DomainDataset> {
        let (spec, fractions) = cfg.spec(domain);
        let raw = generate_domain(spec)?;
        let split = split_patientwise(&raw, fractions, cfg.split_seed ^ u64::from(domain))?;
        let mut ds = normalize_with_train_stats(&split)?;
        ds.provenance = Some(hash.clone());
        Ok(ds)
    };
    let d1 = build(1)?;
    both_classes(&d1, Split::Val)?;
    both_classes(&d1, Split::Test)?;
    Ok([d1, build(2)?])
}

/// Writes both datasets and split manifests. Byte-identical on reruns.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<GeneratedDomain>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut out = Vec::new();
    for ds in build_datasets(cfg)? {
        let domain = ds.domain_id();
        let path = cfg.dataset_path(domain);
        write_dataset(&ds, &path)?;
        write_json(
            &cfg.manifest_path(domain),
            &ManifestFile {
                format_version: REPORT_VERSION,
                config_hash: hash.clone(),
                splits: SplitManifest::from_dataset(&ds),
            },
        )?;
        out.push(GeneratedDomain {
            domain_id: domain,
            path,
            patients: ds.records.len(),
            split_sizes: Split::ALL.map(|s| ds.records_in(s).len()),
            positives: (domain == 1)
                .then(|| ds.records.iter().filter(|r| r.label == Some(1)).count()),
        });
    }
    Ok(out)
}

/// Reads the generated datasets and checks they belong to `cfg`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<[DomainDataset; 2]> {
    let load = |domain: u8| -> Result<DomainDataset> {
        let path = cfg.dataset_path(domain);
        if !path.exists() {
            return Err(Error::config(format!(
                "dataset {} not found; run `mdmt generate` first",
                path.display()
            )));
        }
        let ds = read_dataset(&path)?;
        let (spec, fractions) = cfg.spec(domain);
        let expected = split_counts(spec.n_patients, fractions)?;
        let actual = Split::ALL.map(|s| ds.records_in(s).len());
        if &ds.spec != spec || actual != expected || !ds.normalized {
            return Err(Error::config(format!(
                "dataset {} was generated from a different config; rerun `mdmt generate`",
                path.display()
            )));
        }
        Ok(ds)
    };
    Ok([load(1)?, load(2)?])
}

/// Datasets on disk if they match `cfg`, otherwise freshly generated ones.
fn ensure_datasets(cfg: &ExperimentConfig) -> Result<[DomainDataset; 2]> {
    match load_datasets(cfg) {
        Ok(ds) => Ok(ds),
        Err(Error::Config(_)) => {
            cmd_generate(cfg)?;
            load_datasets(cfg)
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub format_version: u32,
    pub config_hash: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub experiment: ExperimentConfig,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub format_version: u32,
    pub config_hash: String,
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(flatten)]
    pub record: EpochRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config_hash: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub final_val_auc: f64,
    pub test_auc: f64,
    /// Domain-2 test Dice at ζ; multi-task strategies only.
    pub test_dice: Option<f64>,
    pub wall_clock_secs: f64,
}

pub const RUN_FILES: [&str; 4] = ["config.json", "metrics.jsonl", "checkpoint.mdmt", "report.json"];

/// Trains one strategy/seed pair into its run directory.
pub fn cmd_train(cfg: &ExperimentConfig, strategy: Strategy, seed: u64) -> Result<RunReport> {
    cfg.validate()?;
    let [d1, d2] = load_datasets(cfg)?;
    train_run(cfg, &d1, &d2, strategy, seed)
}

fn train_run(
    cfg: &ExperimentConfig,
    d1: &DomainDataset,
    d2: &DomainDataset,
    strategy: Strategy,
    seed: u64,
) -> Result<RunReport> {
    let hash = cfg.hash();
    let tc = cfg.train.for_run(strategy, seed);
    tc.validate()?;
    let dir = cfg.run_dir(strategy, seed);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(
        &dir.join("config.json"),
        &RunSnapshot {
            format_version: REPORT_VERSION,
            config_hash: hash.clone(),
            strategy,
            seed,
            train_config: tc.clone(),
            experiment: cfg.clone(),
        },
    )?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    let run = train_with_observer(&tc, d1, Some(d2), |record, _| {
        let line = MetricsLine {
            format_version: REPORT_VERSION,
            config_hash: hash.clone(),
            strategy,
            seed,
            record: record.clone(),
        };
        let text = serde_json::to_string(&line).expect("metrics serialize") + "\n";
        if let Err(e) = log.write_all(text.as_bytes()).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    checkpoint::write(
        &dir.join("checkpoint.mdmt"),
        &Checkpoint {
            params: run.best.params.clone(),
            epoch: run.best.epoch,
            val_auc: run.best.val_auc,
            config_hash: hash.clone(),
        },
    )?;
    let test_auc = auc_on(&run.best.params, &d1.records_in(Split::Test))?;
    let test_dice = if strategy.uses_detection() {
        Some(mean_dice(&run.best.params, &d2.records_in(Split::Test), tc.zeta)?)
    } else {
        None
    };
    let report = RunReport {
        format_version: REPORT_VERSION,
        config_hash: hash,
        strategy,
        seed,
        epochs: tc.epochs,
        best_epoch: run.best.epoch,
        best_val_auc: run.best.val_auc,
        final_val_auc: run.history.last().expect("epochs ≥ 1").val_auc,
        test_auc,
        test_dice,
        wall_clock_secs: run.wall_clock_secs,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// A finished run from an earlier invocation with the same config hash.
pub fn cached_report(cfg: &ExperimentConfig, strategy: Strategy, seed: u64) -> Option<RunReport> {
    let dir = cfg.run_dir(strategy, seed);
    let report: RunReport = read_json(&dir.join("report.json")).ok()?;
    let complete = RUN_FILES.iter().all(|f| dir.join(f).is_file());
    (complete
        && report.config_hash == cfg.hash()
        && report.strategy == strategy
        && report.seed == seed)
        .then_some(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub checkpoint_epoch: usize,
    pub dataset: PathBuf,
    pub domain_id: u8,
    pub split: Split,
    pub patients: usize,
    pub auc: Option<f64>,
    pub dice: Option<f64>,
    pub zeta: f64,
}

/// Scores a checkpoint on one split. AUC needs scan labels, Dice needs
/// ground-truth masks; each is reported only when the data carries it.
pub fn cmd_evaluate(
    checkpoint_path: &Path,
    dataset_path: &Path,
    split: Split,
    zeta: f64,
) -> Result<EvalReport> {
    let ckpt = checkpoint::read(checkpoint_path)?;
    let ds = read_dataset(dataset_path)?;
    if ds.shape() != ckpt.params.arch.input_shape {
        return Err(Error::config(format!(
            "checkpoint expects volumes of {:?}, dataset holds {:?}",
            ckpt.params.arch.input_shape,
            ds.shape()
        )));
    }
    if !ds.is_split() || !ds.normalized {
        return Err(Error::config("dataset must be split and normalized"));
    }
    let records = ds.records_in(split);
    let has_labels = records.iter().all(|r| r.label.is_some());
    let has_masks = records.iter().all(|r| r.mask.is_some());
    let auc = if has_labels {
        Some(auc_on(&ckpt.params, &records)?)
    } else {
        None
    };
    let dice = if has_masks {
        Some(mean_dice(&ckpt.params, &records, zeta)?)
    } else {
        None
    };
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        config_hash: ckpt.config_hash,
        checkpoint: checkpoint_path.to_path_buf(),
        checkpoint_epoch: ckpt.epoch,
        dataset: dataset_path.to_path_buf(),
        domain_id: ds.domain_id(),
        split,
        patients: records.len(),
        auc,
        dice,
        zeta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub test_auc: Option<f64>,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub test_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub title: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_test_auc: Option<f64>,
    pub min_test_auc: Option<f64>,
    pub max_test_auc: Option<f64>,
    pub mean_val_auc: Option<f64>,
    pub mean_test_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format_version: u32,
    pub config_hash: String,
    pub name: String,
    pub summaries: Vec<StrategySummary>,
    pub rows: Vec<ComparisonRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn summarize(strategy: Strategy, rows: &[ComparisonRow]) -> StrategySummary {
    let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.strategy == strategy).collect();
    let ok: Vec<&ComparisonRow> = mine.iter().copied().filter(|r| r.ok).collect();
    let test: Vec<f64> = ok.iter().filter_map(|r| r.test_auc).collect();
    let val: Vec<f64> = ok.iter().filter_map(|r| r.best_val_auc).collect();
    let dice: Vec<f64> = ok.iter().filter_map(|r| r.test_dice).collect();
    StrategySummary {
        strategy,
        title: strategy.title().to_string(),
        runs: mine.len(),
        failed: mine.len() - ok.len(),
        mean_test_auc: mean(&test),
        min_test_auc: test.iter().copied().reduce(f64::min),
        max_test_auc: test.iter().copied().reduce(f64::max),
        mean_val_auc: mean(&val),
        mean_test_dice: mean(&dice),
    }
}

/// Runs, or reuses, every strategy × seed pair and assembles the report.
/// Failed runs become flagged rows instead of aborting the comparison.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cmd_compare_with_progress(cfg, |_, _| {})
}

pub fn cmd_compare_with_progress(
    cfg: &ExperimentConfig,
    progress: impl Fn(&ComparisonRow, bool) + Sync,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let [d1, d2] = ensure_datasets(cfg)?;
    let strategies: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| cfg.strategies.contains(s))
        .collect();
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let rows: Vec<ComparisonRow> = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let (result, cached) = match cached_report(cfg, strategy, seed) {
                Some(r) => (Ok(r), true),
                None => (train_run(cfg, &d1, &d2, strategy, seed), false),
            };
            let row = match result {
                Ok(r) => ComparisonRow {
                    strategy,
                    seed,
                    ok: true,
                    error: None,
                    test_auc: Some(r.test_auc),
                    best_val_auc: Some(r.best_val_auc),
                    best_epoch: Some(r.best_epoch),
                    test_dice: r.test_dice,
                },
                Err(e) => ComparisonRow {
                    strategy,
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                    test_auc: None,
                    best_val_auc: None,
                    best_epoch: None,
                    test_dice: None,
                },
            };
            progress(&row, cached);
            row
        })
        .collect();
    let report = ComparisonReport {
        format_version: REPORT_VERSION,
        config_hash: hash,
        name: cfg.name.clone(),
        summaries: strategies.iter().map(|&s| summarize(s, &rows)).collect(),
        rows,
    };
    write_json(&cfg.output_dir.join("comparison.json"), &report)?;
    let table = render_table(&report);
    let path = cfg.output_dir.join("comparison.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Reads a comparison file, refusing one produced under another config.
pub fn read_comparison(path: &Path, expected_hash: &str) -> Result<ComparisonReport> {
    let report: ComparisonReport = read_json(path)?;
    if report.config_hash != expected_hash {
        return Err(Error::config(format!(
            "{} was produced with config hash {}, expected {expected_hash}",
            path.display(),
            report.config_hash
        )));
    }
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Aligned text table, one line per strategy in the fixed row order.
pub fn render_table(report: &ComparisonReport) -> String {
    let header = [
        "Training method",
        "Test AUC",
        "min",
        "max",
        "Val AUC",
        "Test Dice",
        "Runs",
    ];
    let mut lines: Vec<[String; 7]> = vec![header.map(String::from)];
    for s in &report.summaries {
        let runs = if s.failed > 0 {
            format!("{} ({} FAILED)", s.runs, s.failed)
        } else {
            s.runs.to_string()
        };
        lines.push([
            s.title.clone(),
            cell(s.mean_test_auc),
            cell(s.min_test_auc),
            cell(s.max_test_auc),
            cell(s.mean_val_auc),
            cell(s.mean_test_dice),
            runs,
        ]);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "{} (config {})", report.name, &report.config_hash[..12]);
    for (i, l) in lines.iter().enumerate() {
        let mut row = format!("{:<w$}", l[0], w = widths[0]);
        for c in 1..7 {
            let _ = write!(row, "  {:>w$}", l[c], w = widths[c]);
        }
        out.push_str(row.trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * 6));
            out.push('\n');
        }
    }
    for r in report.rows.iter().filter(|r| !r.ok) {
        let _ = writeln!(
            out,
            "FAILED {} seed {}: {}",
            r.strategy,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    out
}

/// Process exit status for an error: 1 for configuration problems, 2 for
/// failures while running.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn json_round_trip_keeps_hash() {
        let cfg = ExperimentConfig::desk_default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn output_dir_is_not_hashed() {
        let a = ExperimentConfig::desk_default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.epochs += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_and_missing_fields_name_the_path() {
        let mut v = serde_json::to_value(ExperimentConfig::desk_default()).unwrap();
        v["train"]["adam"]["lrr"] = 0.1.into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("train.adam"), "{err}");

        let mut v = serde_json::to_value(ExperimentConfig::desk_default()).unwrap();
        v["domain2"].as_object_mut().unwrap().remove("noise_std");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("domain2") && err.to_string().contains("noise_std"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.seeds.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("seeds"));
        let mut cfg = ExperimentConfig::desk_default();
        cfg.format_version = 9;
        assert!(cfg.validate().unwrap_err().to_string().contains("format_version"));
        let mut cfg = ExperimentConfig::desk_default();
        cfg.domain1_split = [1.0, 0.0, 0.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("domain1_split"));
        let mut cfg = ExperimentConfig::desk_default();
        cfg.train.pseudo_weight = 2.0;
        assert!(cfg.validate().unwrap_err().to_string().starts_with("config error: train:"));
    }

    #[test]
    fn table_flags_failures() {
        let rows = vec![
            ComparisonRow {
                strategy: Strategy::SupervisedBaseline,
                seed: 0,
                ok: true,
                error: None,
                test_auc: Some(0.75),
                best_val_auc: Some(0.8),
                best_epoch: Some(3),
                test_dice: None,
            },
            ComparisonRow {
                strategy: Strategy::SupervisedBaseline,
                seed: 1,
                ok: false,
                error: Some("numeric error: epoch 4: boom".into()),
                test_auc: None,
                best_val_auc: None,
                best_epoch: None,
                test_dice: None,
            },
        ];
        let report = ComparisonReport {
            format_version: REPORT_VERSION,
            config_hash: "0".repeat(64),
            name: "t".into(),
            summaries: vec![summarize(Strategy::SupervisedBaseline, &rows)],
            rows,
        };
        let table = render_table(&report);
        assert!(table.contains("2 (1 FAILED)"));
        assert!(table.contains("FAILED supervised_baseline seed 1"));
        assert_eq!(report.summaries[0].mean_test_auc, Some(0.75));
    }
}
