//! The searchable architecture space: per-stage depths and per-block
//! expansion ratios over a residual backbone.
//!
//! An [`ArchSpec`] stores one ratio index per *active* block, stage-major, so
//! every architecture has exactly one encoding. Widths are derived from the
//! stage base channel count through [`make_divisible`].

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Definition of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub stage_base_channels: Vec<usize>,
    /// Inclusive `(min, max)` block counts, one pair per stage.
    pub depth_ranges: Vec<(usize, usize)>,
    /// Expansion ratios, strictly decreasing, starting at 1.0.
    pub ratio_set: Vec<f64>,
    pub divisor: usize,
    pub input_resolution: (usize, usize),
    pub num_classes: usize,
}

impl SpaceConfig {
    /// The ResNet48-style space: four stages, 7 ratios, ~5.06e19 subnets.
    pub fn paper_scale() -> Self {
        SpaceConfig {
            stage_base_channels: vec![64, 128, 256, 512],
            depth_ranges: vec![(2, 5), (2, 5), (2, 8), (2, 5)],
            ratio_set: vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7],
            divisor: 8,
            input_resolution: (224, 224),
            num_classes: 1000,
        }
    }

    /// Desk-scale space with 144 architectures.
    pub fn toy() -> Self {
        SpaceConfig {
            stage_base_channels: vec![16, 32],
            depth_ranges: vec![(1, 2), (1, 2)],
            ratio_set: vec![1.0, 0.75, 0.5],
            divisor: 8,
            input_resolution: (8, 8),
            num_classes: 10,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_base_channels.len()
    }

    pub fn max_depths(&self) -> Vec<usize> {
        self.depth_ranges.iter().map(|r| r.1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_base_channels.is_empty() {
            return Err(Error::Domain("space has no stages".into()));
        }
        if self.depth_ranges.len() != self.stage_base_channels.len() {
            return Err(Error::Domain(format!(
                "{} depth ranges for {} stages",
                self.depth_ranges.len(),
                self.stage_base_channels.len()
            )));
        }
        if self.divisor == 0 {
            return Err(Error::Domain("divisor must be >= 1".into()));
        }
        for (s, &(lo, hi)) in self.depth_ranges.iter().enumerate() {
            if lo < 1 || lo > hi {
                return Err(Error::Domain(format!(
                    "stage {s}: depth range ({lo}, {hi}) is invalid"
                )));
            }
        }
        for &c in &self.stage_base_channels {
            if c == 0 || c % self.divisor != 0 {
                return Err(Error::Domain(format!(
                    "base channels {c} not a positive multiple of {}",
                    self.divisor
                )));
            }
        }
        if self.ratio_set.first() != Some(&1.0) {
            return Err(Error::Domain("ratio set must start at 1.0".into()));
        }
        if self.ratio_set.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("ratio set must be strictly decreasing".into()));
        }
        if self.ratio_set.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Domain("ratios must lie in (0, 1]".into()));
        }
        if self.num_classes == 0 || self.input_resolution.0 == 0 || self.input_resolution.1 == 0
        {
            return Err(Error::Domain("empty input resolution or class set".into()));
        }
        Ok(())
    }
}

/// Round a channel count to a multiple of `divisor`, never dropping more
/// than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> Result<usize> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("channel count {v} must be positive")));
    }
    if divisor == 0 {
        return Err(Error::Domain("divisor must be >= 1".into()));
    }
    let d = divisor as f64;
    let rounded = ((v + d / 2.0).floor() / d).floor() * d;
    let mut out = rounded.max(d);
    if out < 0.9 * v {
        out += d;
    }
    Ok(out as usize)
}

/// Internal width of a block at the given expansion ratio.
pub fn block_width(stage_base: usize, ratio: f64, divisor: usize) -> Result<usize> {
    make_divisible(stage_base as f64 * ratio, divisor)
}

/// One candidate architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depths: Vec<usize>,
    /// One index into the ratio set per active block, stage-major.
    pub ratio_indices: Vec<usize>,
}

impl ArchSpec {
    pub fn validate(&self, config: &SpaceConfig) -> Result<()> {
        if self.depths.len() != config.num_stages() {
            return Err(Error::Contract(format!(
                "arch has {} stages, space has {}",
                self.depths.len(),
                config.num_stages()
            )));
        }
        for (s, (&d, &(lo, hi))) in self.depths.iter().zip(&config.depth_ranges).enumerate() {
            if d < lo || d > hi {
                return Err(Error::Contract(format!(
                    "stage {s} depth {d} outside [{lo}, {hi}]"
                )));
            }
        }
        let total: usize = self.depths.iter().sum();
        if self.ratio_indices.len() != total {
            return Err(Error::Contract(format!(
                "{} ratio indices for {total} active blocks",
                self.ratio_indices.len()
            )));
        }
        if let Some(&bad) = self.ratio_indices.iter().find(|&&i| i >= config.ratio_set.len()) {
            return Err(Error::Contract(format!(
                "ratio index {bad} out of range for {} ratios",
                config.ratio_set.len()
            )));
        }
        Ok(())
    }

    /// Ratio indices of the active blocks of `stage`.
    pub fn stage_ratios(&self, stage: usize) -> &[usize] {
        let start: usize = self.depths[..stage].iter().sum();
        &self.ratio_indices[start..start + self.depths[stage]]
    }

    /// Internal block widths, one list per stage.
    pub fn block_widths(&self, config: &SpaceConfig) -> Result<Vec<Vec<usize>>> {
        self.validate(config)?;
        (0..self.depths.len())
            .map(|s| {
                self.stage_ratios(s)
                    .iter()
                    .map(|&i| {
                        block_width(
                            config.stage_base_channels[s],
                            config.ratio_set[i],
                            config.divisor,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// Canonical string key, e.g. `d=2,1;r=0,2,1`.
    pub fn encode(&self) -> String {
        self.to_string()
    }

    pub fn decode(s: &str, config: &SpaceConfig) -> Result<Self> {
        let arch = parse_arch(s)?;
        arch.validate(config).map_err(|e| Error::Parse {
            position: 0,
            message: e.to_string(),
        })?;
        Ok(arch)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "d={};r={}", join(&self.depths), join(&self.ratio_indices))
    }
}

pub fn encode_arch(arch: &ArchSpec) -> String {
    arch.encode()
}

pub fn decode_arch(s: &str, config: &SpaceConfig) -> Result<ArchSpec> {
    ArchSpec::decode(s, config)
}

fn parse_arch(s: &str) -> Result<ArchSpec> {
    let err = |position: usize, message: &str| Error::Parse {
        position,
        message: message.to_string(),
    };
    let rest = s
        .strip_prefix("d=")
        .ok_or_else(|| err(0, "expected `d=`"))?;
    let semi = rest
        .find(';')
        .ok_or_else(|| err(s.len(), "expected `;r=`"))?;
    let depths_str = &rest[..semi];
    let after = &rest[semi..];
    let ratios_off = 2 + semi + 3;
    let ratios_str = after
        .strip_prefix(";r=")
        .ok_or_else(|| err(2 + semi, "expected `;r=`"))?;

    let parse_list = |text: &str, offset: usize| -> Result<Vec<usize>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let mut pos = offset;
        for tok in text.split(',') {
            let v = tok
                .parse::<usize>()
                .map_err(|_| err(pos, &format!("`{tok}` is not a non-negative integer")))?;
            out.push(v);
            pos += tok.len() + 1;
        }
        Ok(out)
    };
    let depths = parse_list(depths_str, 2)?;
    if depths.is_empty() {
        return Err(err(2, "no depths"));
    }
    let ratio_indices = parse_list(ratios_str, ratios_off)?;
    Ok(ArchSpec {
        depths,
        ratio_indices,
    })
}

/// Number of architectures in the space. Ratio choices count as distinct
/// even when they round to equal widths.
pub fn space_size(config: &SpaceConfig) -> BigUint {
    let r = BigUint::from(config.ratio_set.len());
    config
        .depth_ranges
        .iter()
        .map(|&(lo, hi)| (lo..=hi).map(|d| r.pow(d as u32)).sum::<BigUint>())
        .product()
}

/// Every (depth, ratio tuple) choice for one stage, deterministic order.
fn stage_choices(depth_range: (usize, usize), n_ratios: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for d in depth_range.0..=depth_range.1 {
        let mut idx = vec![0usize; d];
        loop {
            out.push((d, idx.clone()));
            // odometer, last position fastest
            let mut wrapped = true;
            for pos in (0..d).rev() {
                idx[pos] += 1;
                if idx[pos] < n_ratios {
                    wrapped = false;
                    break;
                }
                idx[pos] = 0;
            }
            if wrapped {
                break;
            }
        }
    }
    out
}

/// Every architecture exactly once. Refuses when the space exceeds `cap`.
pub fn enumerate_space(config: &SpaceConfig, cap: u64) -> Result<Vec<ArchSpec>> {
    config.validate()?;
    let size = space_size(config);
    if size > BigUint::from(cap) {
        return Err(Error::Refused(format!(
            "space has {size} architectures, cap is {cap}"
        )));
    }
    let per_stage: Vec<_> = config
        .depth_ranges
        .iter()
        .map(|&r| stage_choices(r, config.ratio_set.len()))
        .collect();
    let mut out = Vec::with_capacity(cap.min(1 << 20) as usize);
    let mut cursor = vec![0usize; per_stage.len()];
    'outer: loop {
        let mut arch = ArchSpec {
            depths: Vec::with_capacity(per_stage.len()),
            ratio_indices: Vec::new(),
        };
        for (choices, &c) in per_stage.iter().zip(&cursor) {
            let (d, ref idx) = choices[c];
            arch.depths.push(d);
            arch.ratio_indices.extend_from_slice(idx);
        }
        out.push(arch);
        let mut s = per_stage.len();
        while s > 0 {
            s -= 1;
            cursor[s] += 1;
            if cursor[s] < per_stage[s].len() {
                continue 'outer;
            }
            cursor[s] = 0;
        }
        break;
    }
    Ok(out)
}

/// How a path is drawn from the space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    Maximum,
    Minimum,
    Balanced,
}

pub fn max_arch(config: &SpaceConfig) -> ArchSpec {
    let depths = config.max_depths();
    let total = depths.iter().sum();
    ArchSpec {
        depths,
        ratio_indices: vec![0; total],
    }
}

pub fn min_arch(config: &SpaceConfig) -> ArchSpec {
    let depths: Vec<usize> = config.depth_ranges.iter().map(|r| r.0).collect();
    let total = depths.iter().sum();
    ArchSpec {
        depths,
        ratio_indices: vec![config.ratio_set.len() - 1; total],
    }
}

pub fn uniform_arch<R: Rng + ?Sized>(config: &SpaceConfig, rng: &mut R) -> ArchSpec {
    let depths: Vec<usize> = config
        .depth_ranges
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect();
    let total: usize = depths.iter().sum();
    let ratio_indices = (0..total)
        .map(|_| rng.random_range(0..config.ratio_set.len()))
        .collect();
    ArchSpec {
        depths,
        ratio_indices,
    }
}

/// Pick index `i` with probability `weights[i] / sum(weights)`.
pub fn weighted_pick<R: Rng + ?Sized>(weights: &[u64], rng: &mut R) -> Result<usize> {
    let total: u128 = weights.iter().map(|&w| w as u128).sum();
    if weights.is_empty() || total == 0 {
        return Err(Error::Domain("weighted pick over zero total weight".into()));
    }
    let target = rng.random_range(0..total);
    let mut acc = 0u128;
    for (i, &w) in weights.iter().enumerate() {
        acc += w as u128;
        if target < acc {
            return Ok(i);
        }
    }
    unreachable!("target below total weight")
}

/// Draw one architecture.
///
/// `Balanced` draws `n_candidates` uniform architectures and keeps one with
/// probability proportional to its FLOPs; candidates are redrawn on every
/// call. `flops_fn` is only consulted by `Balanced`.
pub fn sample<R: Rng + ?Sized>(
    kind: SamplerKind,
    config: &SpaceConfig,
    rng: &mut R,
    n_candidates: usize,
    flops_fn: Option<&dyn Fn(&ArchSpec) -> u64>,
) -> Result<ArchSpec> {
    match kind {
        SamplerKind::Maximum => Ok(max_arch(config)),
        SamplerKind::Minimum => Ok(min_arch(config)),
        SamplerKind::Uniform => Ok(uniform_arch(config, rng)),
        SamplerKind::Balanced => {
            if n_candidates < 1 {
                return Err(Error::Domain(
                    "balanced sampler needs at least one candidate".into(),
                ));
            }
            let flops_fn = flops_fn
                .ok_or_else(|| Error::Domain("balanced sampler needs a FLOPs function".into()))?;
            let mut candidates: Vec<ArchSpec> = (0..n_candidates)
                .map(|_| uniform_arch(config, rng))
                .collect();
            let flops: Vec<u64> = candidates.iter().map(flops_fn).collect();
            let pick = weighted_pick(&flops, rng)?;
            Ok(candidates.swap_remove(pick))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn make_divisible_examples() {
        assert_eq!(make_divisible(64.0, 8).unwrap(), 64);
        assert_eq!(make_divisible(44.8, 8).unwrap(), 48);
        assert_eq!(make_divisible(57.6, 8).unwrap(), 56);
        assert_eq!(make_divisible(1.0, 8).unwrap(), 8);
        assert!(make_divisible(0.0, 8).is_err());
        assert!(make_divisible(-3.0, 8).is_err());
    }

    #[test]
    fn block_width_examples() {
        assert_eq!(block_width(64, 1.0, 8).unwrap(), 64);
        assert_eq!(block_width(64, 0.7, 8).unwrap(), 48);
        assert_eq!(block_width(512, 0.75, 8).unwrap(), 384);
    }

    #[test]
    fn paper_scale_extremes() {
        let cfg = SpaceConfig::paper_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let max = sample(SamplerKind::Maximum, &cfg, &mut rng, 1, None).unwrap();
        assert_eq!(max.depths, vec![5, 5, 8, 5]);
        assert!(max.ratio_indices.iter().all(|&i| cfg.ratio_set[i] == 1.0));
        let min = sample(SamplerKind::Minimum, &cfg, &mut rng, 1, None).unwrap();
        assert_eq!(min.depths, vec![2, 2, 2, 2]);
        assert!(min.ratio_indices.iter().all(|&i| cfg.ratio_set[i] == 0.7));
    }

    #[test]
    fn small_space_sizes() {
        let one = SpaceConfig {
            stage_base_channels: vec![8],
            depth_ranges: vec![(1, 1)],
            ratio_set: vec![1.0, 0.5],
            divisor: 8,
            input_resolution: (4, 4),
            num_classes: 2,
        };
        assert_eq!(space_size(&one), BigUint::from(2u32));
        let two = SpaceConfig {
            stage_base_channels: vec![8, 16],
            depth_ranges: vec![(1, 2), (1, 2)],
            ratio_set: vec![1.0, 0.75, 0.5],
            ..one
        };
        assert_eq!(space_size(&two), BigUint::from(144u32));
        assert_eq!(enumerate_space(&two, 1000).unwrap().len(), 144);
    }

    #[test]
    fn enumeration_cap_refuses() {
        let err = enumerate_space(&SpaceConfig::paper_scale(), 1_000_000).unwrap_err();
        assert!(matches!(err, Error::Refused(ref m) if m.contains("50")));
    }

    #[test]
    fn decode_rejects_bad_strings() {
        let cfg = SpaceConfig::toy();
        assert!(decode_arch("d=3,1;r=0,0,0,0", &cfg).is_err());
        match decode_arch("d=1,x;r=0", &cfg) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("unexpected {other:?}"),
        }
        match decode_arch("d=1,1;r=0,zz", &cfg) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 10),
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_arch("depths=1", &cfg).is_err());
        let a = decode_arch("d=1,2;r=0,2,1", &cfg).unwrap();
        assert_eq!(a.encode(), "d=1,2;r=0,2,1");
    }

    #[test]
    fn balanced_requires_candidates_and_flops() {
        let cfg = SpaceConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = |_: &ArchSpec| 1u64;
        assert!(sample(SamplerKind::Balanced, &cfg, &mut rng, 0, Some(&f)).is_err());
        assert!(sample(SamplerKind::Balanced, &cfg, &mut rng, 3, None).is_err());
        let a = sample(SamplerKind::Balanced, &cfg, &mut rng, 3, Some(&f)).unwrap();
        a.validate(&cfg).unwrap();
    }

    #[test]
    fn config_validation() {
        let mut cfg = SpaceConfig::toy();
        cfg.ratio_set = vec![1.0, 1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = SpaceConfig::toy();
        cfg.stage_base_channels = vec![16, 30];
        assert!(cfg.validate().is_err());
        let mut cfg = SpaceConfig::toy();
        cfg.depth_ranges[0] = (0, 2);
        assert!(cfg.validate().is_err());
        SpaceConfig::paper_scale().validate().unwrap();
    }
}
