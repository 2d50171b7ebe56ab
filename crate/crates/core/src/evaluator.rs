//! Ground truth, inherited-weight evaluation and ranking consistency.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch_space::ArchSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{BnMode, InitScheme, Network, SubnetPlan};
use crate::seeding::{derive_seed, rng_for};
use crate::supernet::{SupernetConfig, SupernetState};
use crate::trainer::{check_data, cross_entropy, lr_at, sgd_update, TrainConfig};

/// Default number of batches used to re-estimate normalization statistics.
pub const RECALIBRATION_STEPS: usize = 20;

/// Copy of `state` whose normalization statistics along `arch` are
/// re-estimated from `steps` training batches (cumulative average), in
/// evaluation mode. `state` itself is not modified.
pub fn recalibrate_bn(
    state: &SupernetState,
    arch: &ArchSpec,
    data: &Dataset,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SupernetState> {
    if steps < 1 {
        return Err(Error::Domain("recalibration needs at least one step".into()));
    }
    if data.is_empty() {
        return Err(Error::Domain("recalibration data is empty".into()));
    }
    let plan = state.config.plan(arch)?;
    let mut snap = state.clone();
    snap.net.reset_stats(&plan);
    let mut batches = Vec::new();
    let mut epoch = 0;
    while batches.len() < steps {
        batches.extend(data.shuffled_batches(seed, epoch, batch_size));
        epoch += 1;
    }
    for (t, idx) in batches.iter().take(steps).enumerate() {
        let batch = data.gather(idx);
        let out = snap.net.forward(&plan, &batch.x, BnMode::Batch)?;
        snap.net.absorb_batch_stats(&out.cache, 1.0 / (t + 1) as f32);
    }
    snap.training = false;
    Ok(snap)
}

/// Mean cross-entropy and top-1 accuracy of `plan` on `data`.
pub fn evaluate_network(
    net: &Network,
    plan: &SubnetPlan,
    data: &Dataset,
    mode: BnMode,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let classes = net.layout.num_classes;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for idx in data.sequential_batches(batch_size) {
        let batch = data.gather(&idx);
        let logits = net.forward(plan, &batch.x, mode)?.logits;
        let (l, _) = cross_entropy(&logits, &batch.y, classes)?;
        loss += l * idx.len() as f64;
        for (i, &y) in batch.y.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let best = (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("at least one class");
            correct += (best == y) as usize;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Loss and accuracy of `arch` with inherited weights.
pub fn evaluate_subnet(state: &SupernetState, arch: &ArchSpec, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let plan = state.config.plan(arch)?;
    evaluate_network(&state.net, &plan, data, state.bn_mode(), batch_size)
}

/// Outcome of training one architecture from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandaloneResult {
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    /// Why training was abandoned, if it was.
    pub failed: Option<String>,
}

/// Train `arch` alone from a fresh initialization with the optimizer
/// settings of `config` for `epochs` epochs; report validation loss and
/// accuracy. Divergence yields a failed result rather than an error.
pub fn train_standalone(
    arch: &ArchSpec,
    config: &TrainConfig,
    epochs: usize,
    supernet: &SupernetConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<StandaloneResult> {
    if epochs == 0 {
        return Err(Error::Domain("standalone training needs at least one epoch".into()));
    }
    check_data(supernet, train)?;
    check_data(supernet, val)?;
    let plan = supernet.plan(arch)?;
    let mut net = Network::init(&supernet.layout(), &plan, InitScheme::FanIn, &mut rng_for(seed, 11))?;
    let mut velocity = net.zeros_like();
    let schedule = TrainConfig {
        total_epochs: epochs,
        ..config.clone()
    };
    let classes = supernet.space.num_classes;
    let data_seed = derive_seed(seed, 12);
    let mut result = StandaloneResult {
        arch: arch.encode(),
        seed,
        epochs,
        loss: None,
        accuracy: None,
        failed: None,
    };
    for epoch in 0..epochs {
        let lr = lr_at(&schedule, epoch);
        for idx in train.shuffled_batches(data_seed, epoch, config.batch_size) {
            let batch = train.gather(&idx);
            let out = net.forward(&plan, &batch.x, BnMode::Batch)?;
            let (loss, dlogits) = cross_entropy(&out.logits, &batch.y, classes)?;
            if !loss.is_finite() {
                result.failed = Some(format!("loss {loss} at epoch {epoch}"));
                return Ok(result);
            }
            let mut grads = net.zeros_like();
            net.backward(&out.cache, &dlogits, &mut grads);
            sgd_update(&mut net, &grads, &mut velocity, lr, config.momentum, config.weight_decay);
            net.absorb_batch_stats(&out.cache, config.bn_momentum as f32);
        }
    }
    let (loss, acc) = evaluate_network(&net, &plan, val, BnMode::Running, config.batch_size)?;
    if !loss.is_finite() {
        result.failed = Some(format!("validation loss {loss}"));
        return Ok(result);
    }
    result.loss = Some(loss);
    result.accuracy = Some(acc);
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Pearson,
    Spearman,
    Kendall,
}

fn check_inputs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!(
            "sequences differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Domain(format!(
            "correlation needs at least 3 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tie_x, mut tie_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                tie_x += 1;
                tie_y += 1;
            } else if dx == 0.0 {
                tie_x += 1;
            } else if dy == 0.0 {
                tie_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tie_x) as f64) * ((n0 - tie_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Sample correlation of two equally long sequences.
pub fn correlation(xs: &[f64], ys: &[f64], kind: CorrelationKind) -> Result<f64> {
    check_inputs(xs, ys)?;
    match kind {
        CorrelationKind::Pearson => pearson(xs, ys),
        CorrelationKind::Spearman => pearson(&average_ranks(xs), &average_ranks(ys)),
        CorrelationKind::Kendall => kendall_tau_b(xs, ys),
    }
}

/// Quantities a record can be correlated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordField {
    Flops,
    Params,
    ZenScore,
    SupernetLoss,
    SupernetAccuracy,
    StandaloneLoss,
    StandaloneAccuracy,
}

impl RecordField {
    pub const ALL: [RecordField; 7] = [
        RecordField::Flops,
        RecordField::Params,
        RecordField::ZenScore,
        RecordField::SupernetLoss,
        RecordField::SupernetAccuracy,
        RecordField::StandaloneLoss,
        RecordField::StandaloneAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordField::Flops => "flops",
            RecordField::Params => "params",
            RecordField::ZenScore => "zen_score",
            RecordField::SupernetLoss => "supernet_loss",
            RecordField::SupernetAccuracy => "supernet_accuracy",
            RecordField::StandaloneLoss => "standalone_loss",
            RecordField::StandaloneAccuracy => "standalone_accuracy",
        }
    }
}

impl fmt::Display for RecordField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecordField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        let field = match s.as_str() {
            "supernet_acc" => RecordField::SupernetAccuracy,
            "standalone_acc" => RecordField::StandaloneAccuracy,
            "zen" => RecordField::ZenScore,
            _ => *RecordField::ALL
                .iter()
                .find(|f| f.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown record field `{s}`")))?,
        };
        Ok(field)
    }
}

/// Everything known about one architecture in one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub arch: String,
    pub flops: u64,
    pub params: u64,
    #[serde(default)]
    pub zen_score: Option<f64>,
    #[serde(default)]
    pub supernet_loss: Option<f64>,
    #[serde(default)]
    pub supernet_accuracy: Option<f64>,
    #[serde(default)]
    pub standalone_loss: Option<f64>,
    #[serde(default)]
    pub standalone_accuracy: Option<f64>,
    /// Seeds keyed by what they drove (e.g. `supernet`, `standalone`).
    #[serde(default)]
    pub seeds: std::collections::BTreeMap<String, u64>,
    /// Set when stand-alone training diverged.
    #[serde(default)]
    pub failed: Option<String>,
    /// Unix seconds when the record was produced.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

impl TrialRecord {
    pub fn new(arch: &ArchSpec, flops: u64, params: u64) -> Self {
        TrialRecord {
            arch: arch.encode(),
            flops,
            params,
            zen_score: None,
            supernet_loss: None,
            supernet_accuracy: None,
            standalone_loss: None,
            standalone_accuracy: None,
            seeds: Default::default(),
            failed: None,
            timestamp: None,
        }
    }

    pub fn get(&self, field: RecordField) -> Option<f64> {
        match field {
            RecordField::Flops => Some(self.flops as f64),
            RecordField::Params => Some(self.params as f64),
            RecordField::ZenScore => self.zen_score,
            RecordField::SupernetLoss => self.supernet_loss,
            RecordField::SupernetAccuracy => self.supernet_accuracy,
            RecordField::StandaloneLoss => self.standalone_loss,
            RecordField::StandaloneAccuracy => self.standalone_accuracy,
        }
    }

    pub fn validate(&self, space: &crate::arch_space::SpaceConfig) -> Result<()> {
        ArchSpec::decode(&self.arch, space)?;
        for v in [self.supernet_accuracy, self.standalone_accuracy].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Coefficients on the 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub x: RecordField,
    pub y: RecordField,
    pub n: usize,
    /// Records without both fields, or marked failed.
    pub excluded: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl fmt::Display for CorrelationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} vs {} (n={}, excluded={}): pearson {:.2}, spearman {:.2}, kendall {:.2}",
            self.x, self.y, self.n, self.excluded, self.pearson, self.spearman, self.kendall
        )
    }
}

pub fn consistency_report(records: &[TrialRecord], x: RecordField, y: RecordField) -> Result<CorrelationReport> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.failed.is_none())
        .filter_map(|r| Some((r.get(x)?, r.get(y)?)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::Domain(format!(
            "{} usable records for {x} vs {y}, need at least 3",
            pairs.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(CorrelationReport {
        x,
        y,
        n: xs.len(),
        excluded: records.len() - xs.len(),
        pearson: 100.0 * correlation(&xs, &ys, CorrelationKind::Pearson)?,
        spearman: 100.0 * correlation(&xs, &ys, CorrelationKind::Spearman)?,
        kendall: 100.0 * correlation(&xs, &ys, CorrelationKind::Kendall)?,
    })
}

/// Append one record as a single JSON line. Each call issues one write on
/// an append-mode handle, so concurrent writers never interleave lines.
pub fn append_record(path: &Path, record: &TrialRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                position: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

/// Summary table with columns
/// `arch,flops,params,zen_score,supernet_acc,standalone_acc`.
pub fn summary_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from("arch,flops,params,zen_score,supernet_acc,standalone_acc\n");
    for r in records {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{}\n",
            r.arch,
            r.flops,
            r.params,
            csv_cell(r.zen_score),
            csv_cell(r.supernet_accuracy),
            csv_cell(r.standalone_accuracy)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let p = |x: &[f64], y: &[f64]| correlation(x, y, CorrelationKind::Pearson).unwrap();
        assert!((p(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-10);
        assert!((p(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-10);
        assert!((p(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn zero_variance_is_an_error() {
        for kind in [CorrelationKind::Pearson, CorrelationKind::Spearman, CorrelationKind::Kendall] {
            assert!(matches!(
                correlation(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0], kind),
                Err(Error::UndefinedCorrelation(_))
            ));
        }
        assert!(correlation(&[1.0, 2.0], &[1.0, 2.0], CorrelationKind::Pearson).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn kendall_with_ties() {
        // one tie in x: C=2, D=0, tie_x=1, n0=3 -> 2 / sqrt(2*3)
        let t = correlation(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0], CorrelationKind::Kendall).unwrap();
        assert!((t - 2.0 / 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn field_names_roundtrip() {
        for f in RecordField::ALL {
            assert_eq!(f.name().parse::<RecordField>().unwrap(), f);
        }
        assert_eq!("supernet_acc".parse::<RecordField>().unwrap(), RecordField::SupernetAccuracy);
        assert!("accuracy".parse::<RecordField>().is_err());
    }
}
