//! Supernet training: balanced sandwich sampling, in-place distillation and
//! the prior-guided pairwise rank loss.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::RwLock;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch_space::{max_arch, min_arch, sample, uniform_arch, ArchSpec, SamplerKind};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::network::{BatchStats, Network};
use crate::proxies::{score_proxy, ProxyKind, ZenConfig};
use crate::seeding::{derive_seed, rng_for};
use crate::supernet::{build_supernet, save_checkpoint, SupernetConfig, SupernetState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Warmup,
    Cosine,
    Multistage,
}

/// How the rank-loss coefficient evolves over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default = "ScheduleSpec::default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "ScheduleSpec::default_warmup_epochs")]
    pub warmup_epochs: usize,
    /// Zero, rise, hold and decay fractions of the run (multistage only).
    #[serde(default = "ScheduleSpec::default_fractions")]
    pub stage_fractions: [f64; 4],
}

impl ScheduleSpec {
    fn default_lambda_max() -> f64 {
        2.0
    }
    fn default_warmup_epochs() -> usize {
        20
    }
    fn default_fractions() -> [f64; 4] {
        [0.25; 4]
    }

    pub fn new(kind: ScheduleKind) -> Self {
        ScheduleSpec {
            kind,
            lambda_max: Self::default_lambda_max(),
            warmup_epochs: Self::default_warmup_epochs(),
            stage_fractions: Self::default_fractions(),
        }
    }

    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if !(self.lambda_max >= 0.0) || !self.lambda_max.is_finite() {
            return Err(Error::Config(format!(
                "lambda_max must be a finite value >= 0, got {}",
                self.lambda_max
            )));
        }
        if self.kind == ScheduleKind::Warmup && self.warmup_epochs > total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total epochs {total_epochs}",
                self.warmup_epochs
            )));
        }
        if self.kind == ScheduleKind::Multistage {
            let f = &self.stage_fractions;
            if f.iter().any(|&v| !(v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "stage fractions must be non-negative and sum to 1, got {f:?}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::new(ScheduleKind::Warmup)
    }
}

/// Rank-loss coefficient at `epoch`.
pub fn lambda_at(schedule: &ScheduleSpec, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    let lm = schedule.lambda_max;
    let e = epoch as f64;
    let t = total_epochs as f64;
    Ok(match schedule.kind {
        ScheduleKind::Constant => lm,
        ScheduleKind::Warmup => {
            if schedule.warmup_epochs == 0 {
                lm
            } else {
                lm * (e / schedule.warmup_epochs as f64).min(1.0)
            }
        }
        ScheduleKind::Cosine => lm * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * e / t).cos()),
        ScheduleKind::Multistage => {
            let f = schedule.stage_fractions;
            let b1 = f[0] * t;
            let b2 = b1 + f[1] * t;
            let b3 = b2 + f[2] * t;
            if e < b1 {
                0.0
            } else if e < b2 {
                lm * (e - b1) / (f[1] * t)
            } else if e < b3 {
                lm
            } else {
                lm * (1.0 - (e - b3) / (f[3] * t)).max(0.0)
            }
        }
    })
}

/// Hinge on the loss difference of a pair ordered by prior: the
/// architecture with the higher prior is expected to have the lower loss.
/// Equal priors give 0.
pub fn rank_loss(k_a: f64, k_b: f64, loss_a: f64, loss_b: f64, margin: f64) -> f64 {
    let (better, worse) = if k_a > k_b {
        (loss_a, loss_b)
    } else if k_b > k_a {
        (loss_b, loss_a)
    } else {
        return 0.0;
    };
    (better - worse + margin).max(0.0)
}

/// `(d/dloss_a, d/dloss_b)` of [`rank_loss`]. The kink takes the zero
/// subgradient.
pub fn rank_loss_grad(k_a: f64, k_b: f64, loss_a: f64, loss_b: f64, margin: f64) -> (f64, f64) {
    if rank_loss(k_a, k_b, loss_a, loss_b, margin) <= 0.0 {
        return (0.0, 0.0);
    }
    if k_a > k_b {
        (1.0, -1.0)
    } else {
        (-1.0, 1.0)
    }
}

/// Softmax of one row. `+inf` entries share the mass; `-inf` get none.
fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    if max == f64::INFINITY {
        let n = row.iter().filter(|&&v| v == f32::INFINITY).count() as f64;
        return row
            .iter()
            .map(|&v| if v == f32::INFINITY { 1.0 / n } else { 0.0 })
            .collect();
    }
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Mean hard-label cross-entropy over a `[N][classes]` batch, with its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> Result<(f64, Vec<f32>)> {
    let n = labels.len();
    if n == 0 || logits.len() != n * classes {
        return Err(Error::Contract(format!(
            "{} logits for {n} labels of {classes} classes",
            logits.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let logp = log_softmax_row(row);
        loss -= logp[y];
        for (j, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            *g = ((logp[j].exp() - t) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Soft cross-entropy `-sum softmax(teacher) * log_softmax(student)`,
/// batch-averaged, with its gradient with respect to the student logits.
/// The teacher receives no gradient.
pub fn distill_loss(teacher: &[f32], student: &[f32], classes: usize) -> Result<(f64, Vec<f32>)> {
    if teacher.len() != student.len() || classes == 0 || student.len() % classes != 0 {
        return Err(Error::Contract(format!(
            "teacher has {} logits, student {} ({classes} classes)",
            teacher.len(),
            student.len()
        )));
    }
    let n = student.len() / classes;
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; student.len()];
    for i in 0..n {
        let r = i * classes..(i + 1) * classes;
        let p = softmax_row(&teacher[r.clone()]);
        let logq = log_softmax_row(&student[r.clone()]);
        for j in 0..classes {
            if p[j] > 0.0 {
                loss -= p[j] * logq[j];
            }
            grad[i * classes + j] = ((logq[j].exp() - p[j]) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// How the non-pair paths of a step are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// `n` uniformly drawn paths, each on hard labels.
    Uniform,
    /// Max path on labels, min and `n - 2` uniform paths distilled from it.
    Sandwich,
    /// Like `Sandwich`, middle paths drawn with FLOPs-proportional
    /// probability.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_epochs")]
    pub total_epochs: usize,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Linear learning-rate warmup before cosine decay.
    #[serde(default = "TrainConfig::default_lr_warmup")]
    pub lr_warmup_epochs: usize,
    #[serde(default = "TrainConfig::default_n")]
    pub n_subnets: usize,
    #[serde(default = "TrainConfig::default_m")]
    pub m_pairs: usize,
    #[serde(default = "TrainConfig::default_prior")]
    pub prior: ProxyKind,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_candidates")]
    pub balanced_candidates: usize,
    #[serde(default = "TrainConfig::default_sampling")]
    pub sampling: SamplingStrategy,
    #[serde(default)]
    pub margin: f64,
    /// Momentum of the running normalization statistics.
    #[serde(default = "TrainConfig::default_bn_momentum")]
    pub bn_momentum: f64,
    /// Settings for a Zen-Score prior; its seed stays fixed for the run.
    #[serde(default)]
    pub zen: ZenConfig,
}

impl TrainConfig {
    fn default_epochs() -> usize {
        70
    }
    fn default_batch() -> usize {
        256
    }
    fn default_lr() -> f64 {
        0.001
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_lr_warmup() -> usize {
        5
    }
    fn default_n() -> usize {
        4
    }
    fn default_m() -> usize {
        2
    }
    fn default_prior() -> ProxyKind {
        ProxyKind::Flops
    }
    fn default_candidates() -> usize {
        10
    }
    fn default_sampling() -> SamplingStrategy {
        SamplingStrategy::Balanced
    }
    fn default_bn_momentum() -> f64 {
        0.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_epochs and batch_size must be positive".into()));
        }
        if self.n_subnets < 2 {
            return Err(Error::Config(format!(
                "n_subnets must be >= 2, got {}",
                self.n_subnets
            )));
        }
        if self.balanced_candidates == 0 {
            return Err(Error::Config("balanced_candidates must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr > 0, 0 <= momentum < 1, weight_decay >= 0 required".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        self.schedule.validate(self.total_epochs)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: Self::default_epochs(),
            batch_size: Self::default_batch(),
            lr: Self::default_lr(),
            momentum: Self::default_momentum(),
            weight_decay: 0.0,
            lr_warmup_epochs: Self::default_lr_warmup(),
            n_subnets: Self::default_n(),
            m_pairs: Self::default_m(),
            prior: Self::default_prior(),
            schedule: ScheduleSpec::default(),
            seed: 0,
            balanced_candidates: Self::default_candidates(),
            sampling: Self::default_sampling(),
            margin: 0.0,
            bn_momentum: Self::default_bn_momentum(),
            zen: ZenConfig::default(),
        }
    }
}

/// Learning rate at `epoch`: linear warmup, then cosine decay to zero.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let total = config.total_epochs.max(1);
    let warm = config.lr_warmup_epochs.min(total);
    if epoch < warm {
        return config.lr * (epoch + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = (epoch - warm) as f64 / span;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Heavy-ball SGD on every trainable tensor:
/// `v = momentum * v + g + wd * theta; theta -= lr * v`.
pub fn sgd_update(
    params: &mut Network,
    grads: &Network,
    velocity: &mut Network,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    let g = grads.tensors(false);
    let mut v = velocity.tensors_mut(false);
    for (((_, p), (_, g)), (_, v)) in params.tensors_mut(false).into_iter().zip(g).zip(v.iter_mut()) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}

fn zero(net: &mut Network) {
    for (_, t) in net.tensors_mut(true) {
        t.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Prior values memoized per `(arch, seed)`. Reads may run concurrently;
/// writes take the lock exclusively.
pub struct PriorCache {
    pub kind: ProxyKind,
    pub seed: u64,
    zen: ZenConfig,
    values: RwLock<HashMap<String, f64>>,
}

impl PriorCache {
    pub fn new(kind: ProxyKind, seed: u64, zen: ZenConfig) -> Self {
        PriorCache {
            kind,
            seed,
            zen,
            values: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, arch: &ArchSpec, config: &SupernetConfig) -> Result<f64> {
        let key = format!("{}@{}", arch.encode(), self.seed);
        if let Some(&v) = self.values.read().expect("prior cache poisoned").get(&key) {
            return Ok(v);
        }
        let score = score_proxy(self.kind, arch, config, self.seed, &self.zen)?;
        if let Some(d) = score.diagnostic {
            return Err(Error::NonFinite(format!("prior of {arch}: {d}")));
        }
        self.values
            .write()
            .expect("prior cache poisoned")
            .insert(key, score.value);
        Ok(score.value)
    }

    pub fn len(&self) -> usize {
        self.values.read().expect("prior cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathRole {
    Max,
    Min,
    Middle,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLog {
    pub role: PathRole,
    pub arch: String,
    /// Hard-label loss for `Max` and `Uniform`, distillation loss otherwise.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLog {
    pub arch_a: String,
    pub arch_b: String,
    pub prior_a: f64,
    pub prior_b: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub rank_loss: f64,
    /// Factor from the pair-weight hook (1 without one).
    pub weight: f64,
}

/// Record of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepLog {
    pub step: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub paths: Vec<PathLog>,
    pub pairs: Vec<PairLog>,
    /// Pairs dropped because their priors tied twice.
    pub skipped_pairs: usize,
    /// Subnet forward passes executed.
    pub forwards: usize,
    pub optimizer_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl TrainStepLog {
    pub fn max_loss(&self) -> Option<f64> {
        self.paths.iter().find(|p| p.role == PathRole::Max).map(|p| p.loss)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.paths.iter().find(|p| p.role == PathRole::Min).map(|p| p.loss)
    }

    pub fn middle_losses(&self) -> Vec<f64> {
        self.paths
            .iter()
            .filter(|p| p.role == PathRole::Middle)
            .map(|p| p.loss)
            .collect()
    }

    /// Mean hard-label loss of the step's label-trained paths.
    pub fn label_loss(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .paths
            .iter()
            .filter(|p| matches!(p.role, PathRole::Max | PathRole::Uniform))
            .map(|p| p.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Optional multiplier on a pair's rank loss computed from the two
/// architectures.
pub type PairWeight = dyn Fn(&ArchSpec, &ArchSpec) -> f64 + Send + Sync;

/// Optimizer state, sampling stream and prior caches of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub priors: PriorCache,
    flops: PriorCache,
    pair_weight: Option<Box<PairWeight>>,
    grads: Network,
    velocity: Network,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, state: &SupernetState) -> Result<Self> {
        config.validate()?;
        let prior_seed = derive_seed(config.seed, 0x9e1);
        Ok(Trainer {
            priors: PriorCache::new(config.prior, prior_seed, config.zen.clone()),
            flops: PriorCache::new(ProxyKind::Flops, 0, ZenConfig::default()),
            pair_weight: None,
            grads: state.net.zeros_like(),
            velocity: state.net.zeros_like(),
            rng: rng_for(config.seed, 2),
            step: 0,
            config,
        })
    }

    pub fn with_pair_weight(mut self, f: Box<PairWeight>) -> Self {
        self.pair_weight = Some(f);
        self
    }

    fn draw_middle(&mut self, cfg: &SupernetConfig) -> Result<ArchSpec> {
        match self.config.sampling {
            SamplingStrategy::Balanced => {
                let flops = &self.flops;
                let f = |a: &ArchSpec| flops.get(a, cfg).map(|v| v as u64).unwrap_or(0);
                sample(
                    SamplerKind::Balanced,
                    &cfg.space,
                    &mut self.rng,
                    self.config.balanced_candidates,
                    Some(&f),
                )
            }
            _ => Ok(uniform_arch(&cfg.space, &mut self.rng)),
        }
    }

    /// One step of supernet training on `batch`.
    pub fn train_step(&mut self, state: &mut SupernetState, batch: &Batch, epoch: usize) -> Result<TrainStepLog> {
        if !state.training {
            return Err(Error::Contract("train_step needs a state in training mode".into()));
        }
        let cfg = state.config.clone();
        let classes = cfg.space.num_classes;
        let lambda = lambda_at(&self.config.schedule, epoch, self.config.total_epochs)?;
        let lr = lr_at(&self.config, epoch);
        let mut log = TrainStepLog {
            step: self.step,
            epoch,
            lambda,
            lr,
            paths: Vec::new(),
            pairs: Vec::new(),
            skipped_pairs: 0,
            forwards: 0,
            optimizer_steps: 0,
            aborted: None,
        };
        self.step += 1;
        zero(&mut self.grads);
        let mut stats: Vec<BatchStats> = Vec::new();

        let n = self.config.n_subnets;
        let mut plan_paths: Vec<(PathRole, ArchSpec)> = Vec::with_capacity(n);
        if self.config.sampling == SamplingStrategy::Uniform {
            for _ in 0..n {
                plan_paths.push((PathRole::Uniform, uniform_arch(&cfg.space, &mut self.rng)));
            }
        } else {
            plan_paths.push((PathRole::Max, max_arch(&cfg.space)));
            plan_paths.push((PathRole::Min, min_arch(&cfg.space)));
            for _ in 0..n - 2 {
                plan_paths.push((PathRole::Middle, self.draw_middle(&cfg)?));
            }
        }

        let mut teacher: Option<Vec<f32>> = None;
        for (role, arch) in plan_paths {
            let plan = cfg.plan(&arch)?;
            let out = state.net.forward(&plan, &batch.x, state.bn_mode())?;
            log.forwards += 1;
            let (loss, dlogits) = match (&teacher, role) {
                (Some(t), PathRole::Min | PathRole::Middle) => distill_loss(t, &out.logits, classes)?,
                _ => cross_entropy(&out.logits, &batch.y, classes)?,
            };
            log.paths.push(PathLog {
                role,
                arch: arch.encode(),
                loss,
            });
            if !loss.is_finite() {
                log.aborted = Some(format!("{role:?} path {arch} has loss {loss}"));
                break;
            }
            state.net.backward(&out.cache, &dlogits, &mut self.grads);
            stats.push(out.cache.batch_stats());
            if role == PathRole::Max {
                teacher = Some(out.logits);
            }
        }

        if log.aborted.is_none() {
            for _ in 0..self.config.m_pairs {
                let mut pick = || -> Result<Option<(ArchSpec, ArchSpec, f64, f64)>> {
                    for _ in 0..2 {
                        let a = uniform_arch(&cfg.space, &mut self.rng);
                        let b = uniform_arch(&cfg.space, &mut self.rng);
                        let (ka, kb) = (self.priors.get(&a, &cfg)?, self.priors.get(&b, &cfg)?);
                        if ka != kb {
                            return Ok(Some((a, b, ka, kb)));
                        }
                    }
                    Ok(None)
                };
                let Some((a, b, ka, kb)) = pick()? else {
                    log.skipped_pairs += 1;
                    continue;
                };
                let out_a = state.net.forward(&cfg.plan(&a)?, &batch.x, state.bn_mode())?;
                let out_b = state.net.forward(&cfg.plan(&b)?, &batch.x, state.bn_mode())?;
                log.forwards += 2;
                let (la, mut da) = cross_entropy(&out_a.logits, &batch.y, classes)?;
                let (lb, mut db) = cross_entropy(&out_b.logits, &batch.y, classes)?;
                let weight = self.pair_weight.as_ref().map_or(1.0, |f| f(&a, &b));
                let r = rank_loss(ka, kb, la, lb, self.config.margin);
                log.pairs.push(PairLog {
                    arch_a: a.encode(),
                    arch_b: b.encode(),
                    prior_a: ka,
                    prior_b: kb,
                    loss_a: la,
                    loss_b: lb,
                    rank_loss: r,
                    weight,
                });
                if !(la.is_finite() && lb.is_finite() && weight.is_finite()) {
                    log.aborted = Some(format!("pair ({a}, {b}) has losses {la}, {lb}"));
                    break;
                }
                let (ga, gb) = rank_loss_grad(ka, kb, la, lb, self.config.margin);
                let scale = lambda * weight;
                for (d, g, out) in [(&mut da, ga, &out_a), (&mut db, gb, &out_b)] {
                    if g * scale != 0.0 {
                        d.iter_mut().for_each(|v| *v *= (g * scale) as f32);
                        state.net.backward(&out.cache, d, &mut self.grads);
                    }
                }
                stats.push(out_a.cache.batch_stats());
                stats.push(out_b.cache.batch_stats());
            }
        }

        if log.aborted.is_none() {
            let finite = self
                .grads
                .tensors(false)
                .iter()
                .all(|(_, t)| t.iter().all(|v| v.is_finite()));
            if !finite {
                log.aborted = Some("non-finite gradient".into());
            }
        }
        if log.aborted.is_none() {
            sgd_update(
                &mut state.net,
                &self.grads,
                &mut self.velocity,
                lr,
                self.config.momentum,
                self.config.weight_decay,
            );
            for s in &stats {
                state.net.absorb_stats(s, self.config.bn_momentum as f32);
            }
            state.version += 1;
            log.optimizer_steps = 1;
        }
        zero(&mut self.grads);
        Ok(log)
    }
}

/// Convenience wrapper around [`Trainer::train_step`].
pub fn train_step(
    state: &mut SupernetState,
    trainer: &mut Trainer,
    batch: &Batch,
    epoch: usize,
) -> Result<TrainStepLog> {
    trainer.train_step(state, batch, epoch)
}

/// Per-epoch aggregate of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Mean hard-label loss of the label-trained paths.
    pub label_loss: f64,
    pub steps: usize,
    pub aborted_steps: usize,
}

pub struct TrainOutcome {
    pub state: SupernetState,
    pub epochs: Vec<EpochSummary>,
    /// Label loss of every completed step, in order.
    pub loss_trace: Vec<f64>,
}

/// Train a fresh supernet on `data`. Step logs go to `log` as JSON lines;
/// the final state is written to `checkpoint` when given.
pub fn train_supernet(
    config: &TrainConfig,
    supernet: &SupernetConfig,
    data: &Dataset,
    mut log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    supernet.validate()?;
    check_data(supernet, data)?;
    let mut state = build_supernet(supernet, &mut rng_for(config.seed, 1))?;
    let mut trainer = Trainer::new(config.clone(), &state)?;
    let data_seed = derive_seed(config.seed, 3);
    let mut epochs = Vec::with_capacity(config.total_epochs);
    let mut loss_trace = Vec::new();
    for epoch in 0..config.total_epochs {
        let mut sum = 0.0;
        let mut steps = 0;
        let mut aborted = 0;
        for (i, idx) in data.shuffled_batches(data_seed, epoch, config.batch_size).iter().enumerate() {
            let batch = data.gather(idx);
            let entry = trainer
                .train_step(&mut state, &batch, epoch)
                .map_err(|e| Error::Contract(format!("epoch {epoch} step {i}: {e}")))?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n").map_err(|e| Error::io("<train log>", e))?;
            }
            if entry.aborted.is_some() {
                aborted += 1;
            } else if let Some(l) = entry.label_loss() {
                sum += l;
                steps += 1;
                loss_trace.push(l);
            }
        }
        epochs.push(EpochSummary {
            epoch,
            lambda: lambda_at(&config.schedule, epoch, config.total_epochs)?,
            lr: lr_at(config, epoch),
            label_loss: if steps > 0 { sum / steps as f64 } else { f64::NAN },
            steps,
            aborted_steps: aborted,
        });
    }
    state.training = false;
    if let Some(path) = checkpoint {
        save_checkpoint(&state, path)?;
    }
    Ok(TrainOutcome {
        state,
        epochs,
        loss_trace,
    })
}

pub(crate) fn check_data(supernet: &SupernetConfig, data: &Dataset) -> Result<()> {
    let (h, w) = supernet.space.input_resolution;
    if data.height != h || data.width != w || data.channels != supernet.input_channels {
        return Err(Error::Contract(format!(
            "data is {}x{}x{}, supernet expects {}x{h}x{w}",
            data.channels, data.height, data.width, supernet.input_channels
        )));
    }
    if data.num_classes != supernet.space.num_classes {
        return Err(Error::Contract(format!(
            "data has {} classes, supernet {}",
            data.num_classes, supernet.space.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    Ok(())
}
