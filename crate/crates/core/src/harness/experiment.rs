//! End-to-end sweep runs: supernet training, ground truth, reports and a
//! manifest per result directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch_space::{enumerate_space, ArchSpec};
use crate::error::{Error, Result};
use crate::evaluator::{
    append_record, consistency_report, evaluate_subnet, read_records, recalibrate_bn, summary_csv,
    train_standalone, CorrelationReport, RecordField, TrialRecord,
};
use crate::proxies::{count_flops, count_params, zen_score};
use crate::seeding::{derive_seed, rng_for};
use crate::supernet::SupernetConfig;
use crate::trainer::{train_supernet, TrainConfig};

use super::config::{ExperimentConfig, SweepValue};
use super::dataset::{ingest_dataset, DatasetSpec, Splits};
use super::plot::emit_plots;

/// Largest space the harness will enumerate to pick a ground-truth subset.
const ENUMERATION_CAP: u64 = 1_000_000;

/// Correlations written into every cell report.
pub const REPORT_PAIRS: [(RecordField, RecordField); 5] = [
    (RecordField::SupernetAccuracy, RecordField::StandaloneAccuracy),
    (RecordField::Flops, RecordField::StandaloneAccuracy),
    (RecordField::Params, RecordField::StandaloneAccuracy),
    (RecordField::ZenScore, RecordField::StandaloneAccuracy),
    (RecordField::Flops, RecordField::ZenScore),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub x: RecordField,
    pub y: RecordField,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<CorrelationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Result of one (sweep value, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    pub value: String,
    pub seed: u64,
    pub final_label_loss: f64,
    pub aborted_steps: usize,
    pub reports: Vec<ReportEntry>,
}

impl CellReport {
    pub fn find(&self, x: RecordField, y: RecordField) -> Option<&CorrelationReport> {
        self.reports
            .iter()
            .find(|e| e.x == x && e.y == y)
            .and_then(|e| e.report.as_ref())
    }

    /// Pearson (0–100) of supernet accuracy against stand-alone accuracy.
    pub fn headline(&self) -> Option<f64> {
        self.find(RecordField::SupernetAccuracy, RecordField::StandaloneAccuracy)
            .map(|r| r.pearson)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub cell: String,
    pub value: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub headline_pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellStatus>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.ok)
    }
}

pub struct ExperimentResult {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Reports of the cells that completed, in run order.
    pub cells: Vec<CellReport>,
}

impl ExperimentResult {
    /// Headline Pearson for each seed of `value`, in seed order.
    pub fn headlines(&self, value: &str) -> Vec<Option<f64>> {
        self.manifest
            .config
            .seeds
            .iter()
            .map(|&s| {
                self.cells
                    .iter()
                    .find(|c| c.value == value && c.seed == s)
                    .and_then(CellReport::headline)
            })
            .collect()
    }
}

/// The ground-truthed subset of the space, fixed by `subset_seed`.
pub fn ground_truth_archs(config: &ExperimentConfig) -> Result<Vec<ArchSpec>> {
    let mut all = enumerate_space(&config.supernet.space, ENUMERATION_CAP)?;
    all.shuffle(&mut rng_for(config.evaluation.subset_seed, 0x6e7));
    all.truncate(config.evaluation.ground_truth_archs);
    all.sort_by_key(|a| a.encode());
    Ok(all)
}

/// Everything the ground-truth table depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruthKey {
    supernet: SupernetConfig,
    dataset: DatasetSpec,
    batch_size: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    lr_warmup_epochs: usize,
    bn_momentum: f64,
    standalone_epochs: usize,
    zen: crate::proxies::ZenConfig,
    zen_seed: u64,
    seed: u64,
    archs: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Stand-alone records for every ground-truth arch under `seed`, reusing
/// (and completing) a cached table when its key matches.
pub fn build_ground_truth(
    config: &ExperimentConfig,
    data: &Splits,
    seed: u64,
    cache_dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<TrialRecord>> {
    let archs = ground_truth_archs(config)?;
    let key = GroundTruthKey {
        supernet: config.supernet.clone(),
        dataset: config.dataset.clone(),
        batch_size: config.train.batch_size,
        lr: config.train.lr,
        momentum: config.train.momentum,
        weight_decay: config.train.weight_decay,
        lr_warmup_epochs: config.train.lr_warmup_epochs,
        bn_momentum: config.train.bn_momentum,
        standalone_epochs: config.evaluation.standalone_epochs,
        zen: config.evaluation.zen.clone(),
        zen_seed: config.evaluation.zen_seed,
        seed,
        archs: archs.iter().map(ArchSpec::encode).collect(),
    };
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let key_path = cache_dir.join("key.json");
    let records_path = cache_dir.join("records.jsonl");
    let cached_key: Option<GroundTruthKey> = fs::read_to_string(&key_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let mut done: Vec<TrialRecord> = Vec::new();
    if cached_key.as_ref() == Some(&key) && records_path.exists() {
        done = read_records(&records_path)?;
    } else {
        if records_path.exists() {
            fs::remove_file(&records_path).map_err(|e| Error::io(&records_path, e))?;
        }
        write_json(&key_path, &key)?;
    }
    let net = &config.supernet;
    for (i, arch) in archs.iter().enumerate() {
        let code = arch.encode();
        if done.iter().any(|r| r.arch == code) {
            continue;
        }
        let standalone_seed = derive_seed(seed, 1000 + i as u64);
        let result = train_standalone(
            arch,
            &config.train,
            config.evaluation.standalone_epochs,
            net,
            &data.train,
            &data.val,
            standalone_seed,
        )?;
        let mut rec = TrialRecord::new(arch, count_flops(arch, net)?, count_params(arch, net)?);
        let zen = zen_score(arch, net, config.evaluation.zen_seed, &config.evaluation.zen)?;
        rec.zen_score = zen.value.is_finite().then_some(zen.value);
        rec.standalone_loss = result.loss;
        rec.standalone_accuracy = result.accuracy;
        rec.failed = result.failed;
        rec.seeds.insert("standalone".into(), standalone_seed);
        rec.seeds.insert("zen".into(), config.evaluation.zen_seed);
        rec.timestamp = Some(unix_now());
        append_record(&records_path, &rec)?;
        progress(&format!(
            "ground truth seed {seed}: {}/{} {code} acc {:?}",
            i + 1,
            archs.len(),
            rec.standalone_accuracy
        ));
        done.push(rec);
    }
    // table order follows the arch list, whatever order the cache was filled in
    let mut ordered = Vec::with_capacity(archs.len());
    for arch in &archs {
        let code = arch.encode();
        let rec = done
            .iter()
            .find(|r| r.arch == code)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("ground truth missing {code}")))?;
        ordered.push(rec);
    }
    Ok(ordered)
}

fn run_cell(
    config: &ExperimentConfig,
    data: &Splits,
    value: SweepValue,
    seed: u64,
    ground_truth: &[TrialRecord],
    dir: &Path,
) -> Result<CellReport> {
    let name = format!("{}-seed{seed}", value.label());
    let cell_dir = dir.join("cells").join(&name);
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    let (net, train): (SupernetConfig, TrainConfig) = config.cell_configs(value, seed);
    let mut log_file = if config.evaluation.write_train_logs {
        let p = cell_dir.join("train_log.jsonl");
        Some(std::io::BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?))
    } else {
        None
    };
    let ckpt = config
        .evaluation
        .save_checkpoints
        .then(|| cell_dir.join("supernet.ckpt"));
    let outcome = train_supernet(
        &train,
        &net,
        &data.train,
        log_file.as_mut().map(|w| w as &mut dyn std::io::Write),
        ckpt.as_deref(),
    )?;
    drop(log_file);
    let records_path = cell_dir.join("records.jsonl");
    if records_path.exists() {
        fs::remove_file(&records_path).map_err(|e| Error::io(&records_path, e))?;
    }
    let mut records = Vec::with_capacity(ground_truth.len());
    for gt in ground_truth {
        let arch = ArchSpec::decode(&gt.arch, &net.space)?;
        let snap = recalibrate_bn(
            &outcome.state,
            &arch,
            &data.train,
            config.evaluation.recalibration_steps,
            train.batch_size,
            derive_seed(seed, 0xca1),
        )?;
        let (loss, acc) = evaluate_subnet(&snap, &arch, &data.val, config.evaluation.eval_batch_size)?;
        let mut rec = gt.clone();
        rec.supernet_loss = Some(loss);
        rec.supernet_accuracy = Some(acc);
        rec.seeds.insert("supernet".into(), seed);
        append_record(&records_path, &rec)?;
        records.push(rec);
    }
    let csv = cell_dir.join("summary.csv");
    fs::write(&csv, summary_csv(&records)).map_err(|e| Error::io(&csv, e))?;
    let reports = REPORT_PAIRS
        .iter()
        .map(|&(x, y)| match consistency_report(&records, x, y) {
            Ok(r) => ReportEntry {
                x,
                y,
                report: Some(r),
                error: None,
            },
            Err(e) => ReportEntry {
                x,
                y,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let report = CellReport {
        cell: name,
        value: value.label(),
        seed,
        final_label_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.label_loss),
        aborted_steps: outcome.epochs.iter().map(|e| e.aborted_steps).sum(),
        reports,
    };
    write_json(&cell_dir.join("report.json"), &report)?;
    if config.evaluation.plots {
        emit_plots(&records, &cell_dir.join("plots"))?;
    }
    Ok(report)
}

/// Run every (sweep value, seed) cell of `config` under `dir`. A failing
/// cell is recorded in the manifest and the run moves on.
pub fn run_experiment(
    config: &ExperimentConfig,
    dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentResult> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = ingest_dataset(&config.dataset)?;
    let values = config.sweep_values()?;
    let mut statuses = Vec::new();
    let mut cells = Vec::new();
    let gt_root = match &config.evaluation.ground_truth_cache {
        Some(p) => dir.join(p),
        None => dir.join("ground_truth"),
    };
    for &seed in &config.seeds {
        let gt = build_ground_truth(config, &data, seed, &gt_root.join(format!("seed{seed}")), progress);
        for &value in &values {
            let name = format!("{}-seed{seed}", value.label());
            let outcome = match &gt {
                Ok(gt) => run_cell(config, &data, value, seed, gt, dir),
                Err(e) => Err(Error::Contract(format!("ground truth failed: {e}"))),
            };
            match outcome {
                Ok(report) => {
                    progress(&format!(
                        "cell {name}: headline pearson {}",
                        report
                            .headline()
                            .map_or("undefined".to_string(), |p| format!("{p:.2}"))
                    ));
                    statuses.push(CellStatus {
                        cell: name.clone(),
                        value: value.label(),
                        seed,
                        ok: true,
                        error: None,
                        report: Some(PathBuf::from("cells").join(&name).join("report.json")),
                        headline_pearson: report.headline(),
                    });
                    cells.push(report);
                }
                Err(e) => {
                    progress(&format!("cell {name} failed: {e}"));
                    statuses.push(CellStatus {
                        cell: name,
                        value: value.label(),
                        seed,
                        ok: false,
                        error: Some(e.to_string()),
                        report: None,
                        headline_pearson: None,
                    });
                }
            }
        }
    }
    let manifest = Manifest {
        config_digest: config.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        cells: statuses,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(ExperimentResult {
        dir: dir.to_path_buf(),
        manifest,
        cells,
    })
}
