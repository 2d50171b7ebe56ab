//! Zero-cost priors: parameter count, FLOPs and Zen-Score.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch_space::ArchSpec;
use crate::error::{Error, Result};
use crate::network::{BnMode, InitScheme, Network};
use crate::seeding::derive_seed;
use crate::supernet::SupernetConfig;
use crate::tensor::{ConvGeom, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Params,
    Flops,
    ZenScore,
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyKind::Params => "params",
            ProxyKind::Flops => "flops",
            ProxyKind::ZenScore => "zen_score",
        })
    }
}

impl FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "params" => Ok(ProxyKind::Params),
            "flops" => Ok(ProxyKind::Flops),
            "zen_score" | "zen" | "zenscore" => Ok(ProxyKind::ZenScore),
            other => Err(Error::Config(format!("unknown proxy kind `{other}`"))),
        }
    }
}

/// A prior value attached to one architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub kind: ProxyKind,
    pub value: f64,
    pub arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Set when the score is not finite.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Shape of one weighted layer of a subnet, per input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv {
        kernel: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
    },
    Norm {
        channels: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
    },
    /// A learned activation slope.
    Slope,
}

impl LayerShape {
    /// Multiply-accumulates for one sample.
    pub fn macs(&self) -> u64 {
        match *self {
            LayerShape::Conv {
                kernel,
                c_in,
                c_out,
                h_out,
                w_out,
            } => (kernel * kernel * c_in * c_out * h_out * w_out) as u64,
            LayerShape::Linear { c_in, c_out } => (c_in * c_out) as u64,
            LayerShape::Norm { .. } | LayerShape::Slope => 0,
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerShape::Conv {
                kernel, c_in, c_out, ..
            } => (kernel * kernel * c_in * c_out) as u64,
            LayerShape::Norm { channels } => 2 * channels as u64,
            LayerShape::Linear { c_in, c_out } => (c_in * c_out + c_out) as u64,
            LayerShape::Slope => 1,
        }
    }
}

/// Every weighted layer `arch` executes, in forward order.
pub fn layer_plan(arch: &ArchSpec, config: &SupernetConfig) -> Result<Vec<LayerShape>> {
    let widths = arch.block_widths(&config.space)?;
    let (mut h, mut w) = config.space.input_resolution;
    let mut out = Vec::new();
    let stem = ConvGeom {
        kernel: config.stem_kernel,
        stride: 1,
        pad: config.stem_kernel / 2,
    };
    (h, w) = stem.out_size(h, w);
    out.push(LayerShape::Conv {
        kernel: config.stem_kernel,
        c_in: config.input_channels,
        c_out: config.stem_channels,
        h_out: h,
        w_out: w,
    });
    out.push(LayerShape::Norm {
        channels: config.stem_channels,
    });
    let slope = |kind: crate::activation::ActivationKind, out: &mut Vec<LayerShape>| {
        if kind.has_slope() {
            out.push(LayerShape::Slope);
        }
    };
    let mut prev = config.stem_channels;
    for (s, stage_widths) in widths.iter().enumerate() {
        let channels = config.space.stage_base_channels[s];
        let stride = if s == 0 { 1 } else { 2 };
        let down = ConvGeom {
            kernel: 3,
            stride,
            pad: 1,
        };
        let (hs, ws) = down.out_size(h, w);
        if stride != 1 || prev != channels {
            out.push(LayerShape::Conv {
                kernel: 1,
                c_in: prev,
                c_out: channels,
                h_out: hs,
                w_out: ws,
            });
            out.push(LayerShape::Norm { channels });
        }
        for (i, &inner) in stage_widths.iter().enumerate() {
            let c_in = if i == 0 { prev } else { channels };
            out.push(LayerShape::Conv {
                kernel: 3,
                c_in,
                c_out: inner,
                h_out: hs,
                w_out: ws,
            });
            out.push(LayerShape::Norm { channels: inner });
            slope(config.internal_activation, &mut out);
            out.push(LayerShape::Conv {
                kernel: 3,
                c_in: inner,
                c_out: channels,
                h_out: hs,
                w_out: ws,
            });
            out.push(LayerShape::Norm { channels });
            slope(config.external_activation, &mut out);
        }
        (h, w) = (hs, ws);
        prev = channels;
    }
    out.push(LayerShape::Linear {
        c_in: prev,
        c_out: config.space.num_classes,
    });
    Ok(out)
}

/// Multiply-accumulates per input sample. Normalization and activations are
/// not counted.
pub fn count_flops(arch: &ArchSpec, config: &SupernetConfig) -> Result<u64> {
    Ok(layer_plan(arch, config)?.iter().map(LayerShape::macs).sum())
}

/// Trainable scalars the subnet uses: sliced weights, normalization affine
/// terms, activation slopes and the classifier with its bias.
pub fn count_params(arch: &ArchSpec, config: &SupernetConfig) -> Result<u64> {
    Ok(layer_plan(arch, config)?.iter().map(LayerShape::params).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZenConfig {
    #[serde(default = "ZenConfig::default_alpha")]
    pub alpha: f64,
    #[serde(default = "ZenConfig::default_repeats")]
    pub repeats: usize,
    #[serde(default = "ZenConfig::default_batch")]
    pub batch: usize,
    /// Standard-normal weights instead of fan-in scaled ones.
    #[serde(default)]
    pub unit_init: bool,
}

impl ZenConfig {
    fn default_alpha() -> f64 {
        0.01
    }
    fn default_repeats() -> usize {
        32
    }
    fn default_batch() -> usize {
        16
    }
}

impl Default for ZenConfig {
    fn default() -> Self {
        ZenConfig {
            alpha: Self::default_alpha(),
            repeats: Self::default_repeats(),
            batch: Self::default_batch(),
            unit_init: false,
        }
    }
}

/// Output of one network evaluation inside the Zen-Score procedure.
pub struct ZenProbe {
    /// Feature map before global average pooling.
    pub features: FeatureMap,
    /// `sum over normalization layers of log sqrt(mean channel variance)`.
    pub bn_log_scale: f64,
}

/// Zen-Score of an arbitrary network function.
///
/// Draw order from `ChaCha8Rng::seed_from_u64(input_seed)`: for each repeat,
/// `batch` standard-normal inputs of shape `[C][H][W]` (sample-major), then
/// the perturbation with the same shape. The score is
/// `ln(mean_r mean_n ||f(x_n) - f(x_n + alpha eps_n)||_F / alpha)` plus the
/// mean over repeats of the normalization term of the clean pass.
pub fn zen_score_with<F>(
    input_shape: (usize, usize, usize),
    input_seed: u64,
    alpha: f64,
    repeats: usize,
    batch: usize,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&FeatureMap) -> Result<ZenProbe>,
{
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    if repeats < 1 || batch < 1 {
        return Err(Error::Domain("repeats and batch must be >= 1".into()));
    }
    let (c, h, w) = input_shape;
    let per = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
        (0..batch)
            .map(|_| (0..per).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    };
    let mut delta_sum = 0.0f64;
    let mut bn_sum = 0.0f64;
    for _ in 0..repeats {
        let x = draw(&mut rng);
        let eps = draw(&mut rng);
        let mixed: Vec<Vec<f32>> = x
            .iter()
            .zip(&eps)
            .map(|(a, e)| a.iter().zip(e).map(|(a, e)| a + alpha as f32 * e).collect())
            .collect();
        let clean = f(&batch_of(&x, c, h, w))?;
        let perturbed = f(&batch_of(&mixed, c, h, w))?;
        if !clean.features.same_shape(&perturbed.features) {
            return Err(Error::Contract("probe changed output shape".into()));
        }
        let fm = &clean.features;
        let hw = fm.height * fm.width;
        let mut per_sample = vec![0.0f64; fm.batch];
        for ch in 0..fm.channels {
            for (n, acc) in per_sample.iter_mut().enumerate() {
                let off = (ch * fm.batch + n) * hw;
                for i in off..off + hw {
                    let d = (fm.data[i] - perturbed.features.data[i]) as f64;
                    *acc += d * d;
                }
            }
        }
        let mean_norm = per_sample.iter().map(|s| s.sqrt()).sum::<f64>() / fm.batch as f64;
        delta_sum += mean_norm / alpha;
        bn_sum += clean.bn_log_scale;
    }
    Ok((delta_sum / repeats as f64).ln() + bn_sum / repeats as f64)
}

fn batch_of(samples: &[Vec<f32>], c: usize, h: usize, w: usize) -> FeatureMap {
    let refs: Vec<&[f32]> = samples.iter().map(Vec::as_slice).collect();
    FeatureMap::from_samples(&refs, c, h, w)
}

/// Zen-Score of `arch` on a freshly initialized subnet (never trained
/// weights). Non-finite results come back flagged, not as an error.
pub fn zen_score(
    arch: &ArchSpec,
    config: &SupernetConfig,
    seed: u64,
    zen: &ZenConfig,
) -> Result<ProxyScore> {
    let plan = config.plan(arch)?;
    let init = if zen.unit_init {
        InitScheme::Unit
    } else {
        InitScheme::FanIn
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x2e4));
    let net = Network::init(&config.layout(), &plan, init, &mut init_rng)?;
    let (h, w) = config.space.input_resolution;
    let value = zen_score_with(
        (config.input_channels, h, w),
        derive_seed(seed, 0x2e5),
        zen.alpha,
        zen.repeats,
        zen.batch,
        |x| {
            let out = net.forward(&plan, x, BnMode::Batch)?;
            let bn_log_scale = out
                .cache
                .batch_variances()
                .iter()
                .map(|v| {
                    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
                    mean.sqrt().ln()
                })
                .sum();
            Ok(ZenProbe {
                features: out.pre_gap,
                bn_log_scale,
            })
        },
    )?;
    let diagnostic = (!value.is_finite()).then(|| {
        format!("zen score is {value}: a normalization layer or the output difference vanished")
    });
    Ok(ProxyScore {
        kind: ProxyKind::ZenScore,
        value,
        arch: arch.encode(),
        seed: Some(seed),
        diagnostic,
    })
}

/// Evaluate one prior.
pub fn score_proxy(
    kind: ProxyKind,
    arch: &ArchSpec,
    config: &SupernetConfig,
    seed: u64,
    zen: &ZenConfig,
) -> Result<ProxyScore> {
    let value = match kind {
        ProxyKind::Params => count_params(arch, config)? as f64,
        ProxyKind::Flops => count_flops(arch, config)? as f64,
        ProxyKind::ZenScore => return zen_score(arch, config, seed, zen),
    };
    Ok(ProxyScore {
        kind,
        value,
        arch: arch.encode(),
        seed: None,
        diagnostic: None,
    })
}
