//! Slimmable residual network with explicit forward and backward passes.
//!
//! A [`Network`] owns parameters at fixed maximal dimensions. Every forward
//! pass is driven by a [`SubnetPlan`] naming how many blocks of each stage are
//! active and the internal width of each active block; the pass reads the
//! first `k` channels of each weight tensor. A standalone subnet is simply a
//! `Network` whose maximal dimensions equal its plan.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::{activation_backward, apply_activation, Activation, ActivationKind};
use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, FeatureMap, MatRef};

pub const BN_EPS: f32 = 1e-5;

/// Active blocks and their internal widths, one list per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetPlan {
    pub widths: Vec<Vec<usize>>,
}

/// Static description of a network's maximal layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetLayout {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub internal: ActivationKind,
    pub external: ActivationKind,
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    FanIn,
    /// Standard normal.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub out_max: usize,
    pub in_max: usize,
    pub kernel: usize,
    /// `[out][in][k][k]`
    pub weight: Vec<f32>,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        out_max: usize,
        in_max: usize,
        kernel: usize,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_max * kernel * kernel) as f32;
        let std = match init {
            InitScheme::FanIn => (2.0 / fan_in).sqrt(),
            InitScheme::Unit => 1.0,
        };
        let normal = Normal::new(0.0f32, std).expect("positive std");
        Conv {
            out_max,
            in_max,
            kernel,
            weight: (0..out_max * in_max * kernel * kernel)
                .map(|_| normal.sample(rng))
                .collect(),
        }
    }

    fn row_len(&self) -> usize {
        self.in_max * self.kernel * self.kernel
    }

    fn view(&self, cout: usize, cin: usize) -> MatRef<'_> {
        let kk = self.kernel * self.kernel;
        MatRef::new(&self.weight, cout, cin * kk, self.row_len())
    }

    /// Copy of the `[..cout][..cin]` corner.
    fn slice(&self, cout: usize, cin: usize) -> Conv {
        let kk = self.kernel * self.kernel;
        let mut weight = Vec::with_capacity(cout * cin * kk);
        for o in 0..cout {
            let row = &self.weight[o * self.row_len()..];
            weight.extend_from_slice(&row[..cin * kk]);
        }
        Conv {
            out_max: cout,
            in_max: cin,
            kernel: self.kernel,
            weight,
        }
    }

    fn zeros_like(&self) -> Conv {
        Conv {
            weight: vec![0.0; self.weight.len()],
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn slice(&self, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.gamma[..c].to_vec(),
            beta: self.beta[..c].to_vec(),
            running_mean: self.running_mean[..c].to_vec(),
            running_var: self.running_var[..c].to_vec(),
        }
    }

    fn zeros_like(&self) -> BatchNorm {
        let n = self.gamma.len();
        BatchNorm {
            gamma: vec![0.0; n],
            beta: vec![0.0; n],
            running_mean: vec![0.0; n],
            running_var: vec![0.0; n],
        }
    }

    /// Reset the first `c` running statistics.
    fn reset_stats(&mut self, c: usize) {
        self.running_mean[..c].iter_mut().for_each(|v| *v = 0.0);
        self.running_var[..c].iter_mut().for_each(|v| *v = 1.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Maximal internal width.
    pub inner: usize,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub act_int: Activation,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub act_ext: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
    pub proj: Option<(Conv, BatchNorm)>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layout: NetLayout,
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Stage>,
    /// `[classes][C_last]`
    pub head_weight: Vec<f32>,
    pub head_bias: Vec<f32>,
}

/// Normalization mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with running statistics.
    Running,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mean: Vec<f32>,
    var: Vec<f32>,
    mode: BnMode,
}

#[derive(Debug, Clone)]
struct ConvBnCache {
    col: Vec<f32>,
    cin: usize,
    cout: usize,
    in_hw: (usize, usize),
    geom: ConvGeom,
    bn: BnCache,
}

#[derive(Debug, Clone)]
struct BlockCache {
    c1: ConvBnCache,
    pre_int: Vec<f32>,
    c2: ConvBnCache,
    proj: Option<ConvBnCache>,
    pre_ext: Vec<f32>,
}

/// Everything a backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    plan: SubnetPlan,
    batch: usize,
    stem: ConvBnCache,
    pre_stem_act: Vec<f32>,
    blocks: Vec<Vec<BlockCache>>,
    gap: Vec<f32>,
    final_shape: (usize, usize, usize),
}

impl ForwardCache {
    /// Batch variance (biased, per channel) of every normalization layer the
    /// pass touched, in execution order.
    pub fn batch_stats(&self) -> BatchStats {
        let one = |c: &ConvBnCache| {
            (c.bn.mode == BnMode::Batch).then(|| LayerStats {
                mean: c.bn.mean.clone(),
                var: c.bn.var.clone(),
                rows: c.bn.xhat.len() / c.cout.max(1),
            })
        };
        let mut layers = vec![one(&self.stem)];
        for stage in &self.blocks {
            for b in stage {
                layers.push(one(&b.c1));
                layers.push(one(&b.c2));
                if let Some(p) = &b.proj {
                    layers.push(one(p));
                }
            }
        }
        BatchStats {
            plan: self.plan.clone(),
            layers,
        }
    }

    pub fn batch_variances(&self) -> Vec<&[f32]> {
        let mut out = vec![self.stem.bn.var.as_slice()];
        for stage in &self.blocks {
            for b in stage {
                out.push(&b.c1.bn.var);
                out.push(&b.c2.bn.var);
                if let Some(p) = &b.proj {
                    out.push(&p.bn.var);
                }
            }
        }
        out
    }
}

/// Batch statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f32>,
    /// Biased batch variance.
    pub var: Vec<f32>,
    /// Elements per channel the statistics were taken over.
    pub rows: usize,
}

/// Statistics of every normalization layer one forward pass touched, in
/// execution order. `None` for layers run in running-statistics mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub plan: SubnetPlan,
    pub layers: Vec<Option<LayerStats>>,
}

pub struct ForwardOutput {
    /// `[N][classes]`
    pub logits: Vec<f32>,
    /// Last stage output, before global average pooling.
    pub pre_gap: FeatureMap,
    pub cache: ForwardCache,
}

fn bn_forward(bn: &BatchNorm, x: &mut FeatureMap, mode: BnMode) -> BnCache {
    let c = x.channels;
    let m = x.row_len();
    let mut cache = BnCache {
        xhat: vec![0.0; x.data.len()],
        inv_std: vec![0.0; c],
        mean: vec![0.0; c],
        var: vec![0.0; c],
        mode,
    };
    for ch in 0..c {
        let row = &mut x.data[ch * m..(ch + 1) * m];
        let (mean, var) = match mode {
            BnMode::Batch => {
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = row
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                (mean as f32, var as f32)
            }
            BnMode::Running => (bn.running_mean[ch], bn.running_var[ch]),
        };
        let inv = 1.0 / (var + BN_EPS).sqrt();
        cache.mean[ch] = mean;
        cache.var[ch] = var;
        cache.inv_std[ch] = inv;
        let (g, b) = (bn.gamma[ch], bn.beta[ch]);
        let xh = &mut cache.xhat[ch * m..(ch + 1) * m];
        for (v, h) in row.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * inv;
            *v = g * *h + b;
        }
    }
    cache
}

fn bn_backward(bn: &BatchNorm, grad: &mut BatchNorm, cache: &BnCache, dy: &mut FeatureMap) {
    let m = dy.row_len();
    for ch in 0..dy.channels {
        let row = &mut dy.data[ch * m..(ch + 1) * m];
        let xh = &cache.xhat[ch * m..(ch + 1) * m];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for (&g, &h) in row.iter().zip(xh) {
            sum_dy += g as f64;
            sum_dy_xh += (g * h) as f64;
        }
        grad.gamma[ch] += sum_dy_xh as f32;
        grad.beta[ch] += sum_dy as f32;
        let scale = bn.gamma[ch] * cache.inv_std[ch];
        match cache.mode {
            BnMode::Batch => {
                let mean_dy = (sum_dy / m as f64) as f32;
                let mean_dy_xh = (sum_dy_xh / m as f64) as f32;
                for (g, &h) in row.iter_mut().zip(xh) {
                    *g = scale * (*g - mean_dy - h * mean_dy_xh);
                }
            }
            BnMode::Running => row.iter_mut().for_each(|g| *g *= scale),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_forward(
    conv: &Conv,
    bn: &BatchNorm,
    x: &FeatureMap,
    cin: usize,
    cout: usize,
    stride: usize,
    mode: BnMode,
) -> (FeatureMap, ConvBnCache) {
    let geom = ConvGeom {
        kernel: conv.kernel,
        stride,
        pad: conv.kernel / 2,
    };
    let (ho, wo) = geom.out_size(x.height, x.width);
    let col = im2col(x, cin, geom);
    let mut y = FeatureMap::zeros(cout, x.batch, ho, wo);
    let cols = y.row_len();
    let kk = conv.kernel * conv.kernel;
    gemm(
        1.0,
        conv.view(cout, cin),
        MatRef::new(&col, cin * kk, cols, cols),
        0.0,
        &mut y.data,
        cols,
    );
    let bn_cache = bn_forward(bn, &mut y, mode);
    (
        y,
        ConvBnCache {
            col,
            cin,
            cout,
            in_hw: (x.height, x.width),
            geom,
            bn: bn_cache,
        },
    )
}

fn conv_bn_backward(
    conv: &Conv,
    bn: &BatchNorm,
    gconv: &mut Conv,
    gbn: &mut BatchNorm,
    cache: &ConvBnCache,
    mut dy: FeatureMap,
) -> FeatureMap {
    bn_backward(bn, gbn, &cache.bn, &mut dy);
    let (cin, cout) = (cache.cin, cache.cout);
    let kk = conv.kernel * conv.kernel;
    let cols = dy.row_len();
    let row_len = gconv.row_len();
    gemm(
        1.0,
        MatRef::new(&dy.data, cout, cols, cols),
        MatRef::new(&cache.col, cin * kk, cols, cols).t(),
        1.0,
        &mut gconv.weight,
        row_len,
    );
    let mut dcol = vec![0.0f32; cin * kk * cols];
    gemm(
        1.0,
        conv.view(cout, cin).t(),
        MatRef::new(&dy.data, cout, cols, cols),
        0.0,
        &mut dcol,
        cols,
    );
    let mut dx = FeatureMap::zeros(cin, dy.batch, cache.in_hw.0, cache.in_hw.1);
    col2im(&dcol, &mut dx, cin, cache.geom);
    dx
}

fn activate(act: &Activation, x: FeatureMap) -> (FeatureMap, Vec<f32>) {
    let y = apply_activation(act, &x.data);
    let pre = x.data;
    (FeatureMap { data: y, ..x }, pre)
}

fn activate_back(
    act: &Activation,
    gslope: &mut f32,
    pre: &[f32],
    dy: FeatureMap,
) -> FeatureMap {
    let (dx, ds) = activation_backward(act, pre, &dy.data);
    *gslope += ds;
    FeatureMap { data: dx, ..dy }
}

impl Network {
    /// Fresh network whose maximal dimensions equal `plan`.
    pub fn init<R: Rng + ?Sized>(
        layout: &NetLayout,
        plan: &SubnetPlan,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if plan.widths.len() != layout.stage_channels.len() {
            return Err(Error::Contract(format!(
                "plan has {} stages, layout has {}",
                plan.widths.len(),
                layout.stage_channels.len()
            )));
        }
        let stem = Conv::new(
            layout.stem_channels,
            layout.input_channels,
            layout.stem_kernel,
            init,
            rng,
        );
        let mut stages = Vec::new();
        let mut prev = layout.stem_channels;
        for (s, widths) in plan.widths.iter().enumerate() {
            let channels = layout.stage_channels[s];
            let stride = if s == 0 { 1 } else { 2 };
            let proj = if stride != 1 || prev != channels {
                Some((Conv::new(channels, prev, 1, init, rng), BatchNorm::new(channels)))
            } else {
                None
            };
            let mut blocks = Vec::new();
            for (i, &inner) in widths.iter().enumerate() {
                let cin = if i == 0 { prev } else { channels };
                blocks.push(Block {
                    inner,
                    conv1: Conv::new(inner, cin, 3, init, rng),
                    bn1: BatchNorm::new(inner),
                    act_int: Activation::new(layout.internal),
                    conv2: Conv::new(channels, inner, 3, init, rng),
                    bn2: BatchNorm::new(channels),
                    act_ext: Activation::new(layout.external),
                });
            }
            stages.push(Stage {
                channels,
                stride,
                proj,
                blocks,
            });
            prev = channels;
        }
        let bound = 1.0 / (prev as f32).sqrt();
        let head_weight = (0..layout.num_classes * prev)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Network {
            layout: layout.clone(),
            stem_bn: BatchNorm::new(layout.stem_channels),
            stem,
            stages,
            head_weight,
            head_bias: vec![0.0; layout.num_classes],
        })
    }

    /// The plan that runs every block at its maximal width.
    pub fn full_plan(&self) -> SubnetPlan {
        SubnetPlan {
            widths: self
                .stages
                .iter()
                .map(|s| s.blocks.iter().map(|b| b.inner).collect())
                .collect(),
        }
    }

    pub fn check_plan(&self, plan: &SubnetPlan) -> Result<()> {
        if plan.widths.len() != self.stages.len() {
            return Err(Error::Contract(format!(
                "plan has {} stages, network has {}",
                plan.widths.len(),
                self.stages.len()
            )));
        }
        for (s, (w, stage)) in plan.widths.iter().zip(&self.stages).enumerate() {
            if w.is_empty() || w.len() > stage.blocks.len() {
                return Err(Error::Contract(format!(
                    "stage {s}: {} active blocks, network has {}",
                    w.len(),
                    stage.blocks.len()
                )));
            }
            for (i, (&k, b)) in w.iter().zip(&stage.blocks).enumerate() {
                if k == 0 || k > b.inner {
                    return Err(Error::Contract(format!(
                        "stage {s} block {i}: width {k} exceeds {}",
                        b.inner
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run `plan` on a `[C][N][H][W]` batch.
    pub fn forward(&self, plan: &SubnetPlan, x: &FeatureMap, mode: BnMode) -> Result<ForwardOutput> {
        self.check_plan(plan)?;
        if x.channels != self.layout.input_channels {
            return Err(Error::Contract(format!(
                "input has {} channels, network expects {}",
                x.channels, self.layout.input_channels
            )));
        }
        let (h, stem) = conv_bn_forward(
            &self.stem,
            &self.stem_bn,
            x,
            self.layout.input_channels,
            self.layout.stem_channels,
            1,
            mode,
        );
        let (mut h, pre_stem_act) = activate(&Activation::new(ActivationKind::Relu), h);
        let mut prev = self.layout.stem_channels;
        let mut caches = Vec::with_capacity(self.stages.len());
        for (stage, widths) in self.stages.iter().zip(&plan.widths) {
            let mut stage_caches = Vec::with_capacity(widths.len());
            for (i, (block, &k)) in stage.blocks.iter().zip(widths).enumerate() {
                let (cin, stride) = if i == 0 { (prev, stage.stride) } else { (stage.channels, 1) };
                let (y, c1) = conv_bn_forward(&block.conv1, &block.bn1, &h, cin, k, stride, mode);
                let (y, pre_int) = activate(&block.act_int, y);
                let (mut y, c2) =
                    conv_bn_forward(&block.conv2, &block.bn2, &y, k, stage.channels, 1, mode);
                let proj = match (&stage.proj, i) {
                    (Some((pc, pbn)), 0) => {
                        let (s, pcache) =
                            conv_bn_forward(pc, pbn, &h, cin, stage.channels, stride, mode);
                        for (a, b) in y.data.iter_mut().zip(&s.data) {
                            *a += b;
                        }
                        Some(pcache)
                    }
                    _ => {
                        for (a, b) in y.data.iter_mut().zip(&h.data) {
                            *a += b;
                        }
                        None
                    }
                };
                let (y, pre_ext) = activate(&block.act_ext, y);
                h = y;
                stage_caches.push(BlockCache {
                    c1,
                    pre_int,
                    c2,
                    proj,
                    pre_ext,
                });
            }
            caches.push(stage_caches);
            prev = stage.channels;
        }
        let n = h.batch;
        let hw = h.height * h.width;
        let mut gap = vec![0.0f32; n * prev];
        for c in 0..prev {
            for b in 0..n {
                let s: f32 = h.plane(c, b).iter().sum();
                gap[b * prev + c] = s / hw as f32;
            }
        }
        let k = self.layout.num_classes;
        let mut logits = vec![0.0f32; n * k];
        for b in 0..n {
            let g = &gap[b * prev..(b + 1) * prev];
            for j in 0..k {
                let w = &self.head_weight[j * prev..(j + 1) * prev];
                logits[b * k + j] =
                    self.head_bias[j] + w.iter().zip(g).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        let final_shape = (prev, h.height, h.width);
        Ok(ForwardOutput {
            logits,
            pre_gap: h,
            cache: ForwardCache {
                plan: plan.clone(),
                batch: n,
                stem,
                pre_stem_act,
                blocks: caches,
                gap,
                final_shape,
            },
        })
    }

    /// Accumulate parameter gradients of `sum(dlogits * logits)` into
    /// `grads`, which must be shaped like `self`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], grads: &mut Network) {
        let n = cache.batch;
        let k = self.layout.num_classes;
        let (c_last, ho, wo) = cache.final_shape;
        assert_eq!(dlogits.len(), n * k, "dlogits has wrong length");
        let mut dgap = vec![0.0f32; n * c_last];
        for b in 0..n {
            for j in 0..k {
                let d = dlogits[b * k + j];
                grads.head_bias[j] += d;
                let w = &self.head_weight[j * c_last..(j + 1) * c_last];
                let g = &cache.gap[b * c_last..(b + 1) * c_last];
                let gw = &mut grads.head_weight[j * c_last..(j + 1) * c_last];
                for c in 0..c_last {
                    gw[c] += d * g[c];
                    dgap[b * c_last + c] += d * w[c];
                }
            }
        }
        let hw = ho * wo;
        let mut dh = FeatureMap::zeros(c_last, n, ho, wo);
        for c in 0..c_last {
            for b in 0..n {
                let v = dgap[b * c_last + c] / hw as f32;
                let off = (c * n + b) * hw;
                dh.data[off..off + hw].iter_mut().for_each(|x| *x = v);
            }
        }
        for s in (0..self.stages.len()).rev() {
            let stage = &self.stages[s];
            let gstage = &mut grads.stages[s];
            for i in (0..cache.plan.widths[s].len()).rev() {
                let block = &stage.blocks[i];
                let bc = &cache.blocks[s][i];
                let gblock = &mut gstage.blocks[i];
                let d_sum = activate_back(&block.act_ext, &mut gblock.act_ext.slope, &bc.pre_ext, dh);
                let d_short = match (&bc.proj, &stage.proj, &mut gstage.proj) {
                    (Some(pcache), Some((pc, pbn)), Some((gpc, gpbn))) => {
                        conv_bn_backward(pc, pbn, gpc, gpbn, pcache, d_sum.clone())
                    }
                    _ => d_sum.clone(),
                };
                let d = conv_bn_backward(
                    &block.conv2,
                    &block.bn2,
                    &mut gblock.conv2,
                    &mut gblock.bn2,
                    &bc.c2,
                    d_sum,
                );
                let d = activate_back(&block.act_int, &mut gblock.act_int.slope, &bc.pre_int, d);
                let mut d = conv_bn_backward(
                    &block.conv1,
                    &block.bn1,
                    &mut gblock.conv1,
                    &mut gblock.bn1,
                    &bc.c1,
                    d,
                );
                for (a, b) in d.data.iter_mut().zip(&d_short.data) {
                    *a += b;
                }
                dh = d;
            }
        }
        let mut relu_slope = 0.0;
        let d = activate_back(
            &Activation::new(ActivationKind::Relu),
            &mut relu_slope,
            &cache.pre_stem_act,
            dh,
        );
        conv_bn_backward(
            &self.stem,
            &self.stem_bn,
            &mut grads.stem,
            &mut grads.stem_bn,
            &cache.stem,
            d,
        );
    }

    /// Blend the batch statistics recorded in `cache` into the running
    /// statistics of the layers it touched:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache, momentum: f32) {
        self.absorb_stats(&cache.batch_stats(), momentum);
    }

    /// Same as [`Network::absorb_batch_stats`] from a detached snapshot.
    pub fn absorb_stats(&mut self, stats: &BatchStats, momentum: f32) {
        fn blend(bn: &mut BatchNorm, l: &LayerStats, momentum: f32) {
            let unbias = if l.rows > 1 { l.rows as f32 / (l.rows - 1) as f32 } else { 1.0 };
            for ch in 0..l.mean.len() {
                bn.running_mean[ch] = (1.0 - momentum) * bn.running_mean[ch] + momentum * l.mean[ch];
                bn.running_var[ch] =
                    (1.0 - momentum) * bn.running_var[ch] + momentum * l.var[ch] * unbias;
            }
        }
        let mut it = stats.layers.iter();
        let mut next = |bn: &mut BatchNorm| {
            if let Some(Some(l)) = it.next() {
                blend(bn, l, momentum);
            }
        };
        next(&mut self.stem_bn);
        for (stage, widths) in self.stages.iter_mut().zip(&stats.plan.widths) {
            for i in 0..widths.len() {
                next(&mut stage.blocks[i].bn1);
                next(&mut stage.blocks[i].bn2);
                if i == 0 {
                    if let Some((_, pbn)) = &mut stage.proj {
                        next(pbn);
                    }
                }
            }
        }
    }

    /// Reset running statistics of every normalization layer `plan` reads.
    pub fn reset_stats(&mut self, plan: &SubnetPlan) {
        self.stem_bn.reset_stats(self.layout.stem_channels);
        for (stage, widths) in self.stages.iter_mut().zip(&plan.widths) {
            if let Some((_, pbn)) = &mut stage.proj {
                pbn.reset_stats(stage.channels);
            }
            for (block, &k) in stage.blocks.iter_mut().zip(widths) {
                block.bn1.reset_stats(k);
                block.bn2.reset_stats(stage.channels);
            }
        }
    }

    /// Standalone copy of exactly the slices `plan` reads.
    pub fn extract(&self, plan: &SubnetPlan) -> Result<Network> {
        self.check_plan(plan)?;
        let mut prev = self.layout.stem_channels;
        let stages = self
            .stages
            .iter()
            .zip(&plan.widths)
            .map(|(stage, widths)| {
                let blocks = stage
                    .blocks
                    .iter()
                    .zip(widths)
                    .enumerate()
                    .map(|(i, (b, &k))| {
                        let cin = if i == 0 { prev } else { stage.channels };
                        Block {
                            inner: k,
                            conv1: b.conv1.slice(k, cin),
                            bn1: b.bn1.slice(k),
                            act_int: b.act_int,
                            conv2: b.conv2.slice(stage.channels, k),
                            bn2: b.bn2.clone(),
                            act_ext: b.act_ext,
                        }
                    })
                    .collect();
                prev = stage.channels;
                Stage {
                    channels: stage.channels,
                    stride: stage.stride,
                    proj: stage.proj.clone(),
                    blocks,
                }
            })
            .collect();
        Ok(Network {
            layout: self.layout.clone(),
            stem: self.stem.clone(),
            stem_bn: self.stem_bn.clone(),
            stages,
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
        })
    }

    /// Same shape, all values zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Network {
        let zero_act = |a: &Activation| Activation {
            kind: a.kind,
            slope: 0.0,
        };
        Network {
            layout: self.layout.clone(),
            stem: self.stem.zeros_like(),
            stem_bn: self.stem_bn.zeros_like(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    channels: s.channels,
                    stride: s.stride,
                    proj: s
                        .proj
                        .as_ref()
                        .map(|(c, b)| (c.zeros_like(), b.zeros_like())),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| Block {
                            inner: b.inner,
                            conv1: b.conv1.zeros_like(),
                            bn1: b.bn1.zeros_like(),
                            act_int: zero_act(&b.act_int),
                            conv2: b.conv2.zeros_like(),
                            bn2: b.bn2.zeros_like(),
                            act_ext: zero_act(&b.act_ext),
                        })
                        .collect(),
                })
                .collect(),
            head_weight: vec![0.0; self.head_weight.len()],
            head_bias: vec![0.0; self.head_bias.len()],
        }
    }

    /// Named tensors; running statistics are included when `stats` is set.
    pub fn tensors(&self, stats: bool) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        out.push(("stem.weight".into(), &self.stem.weight));
        push_bn(&mut out, "stem_bn", &self.stem_bn, stats);
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some((c, b)) = &stage.proj {
                out.push((format!("s{s}.proj.weight"), &c.weight));
                push_bn(&mut out, &format!("s{s}.proj_bn"), b, stats);
            }
            for (i, blk) in stage.blocks.iter().enumerate() {
                let p = format!("s{s}.b{i}");
                out.push((format!("{p}.conv1"), &blk.conv1.weight));
                push_bn(&mut out, &format!("{p}.bn1"), &blk.bn1, stats);
                out.push((format!("{p}.conv2"), &blk.conv2.weight));
                push_bn(&mut out, &format!("{p}.bn2"), &blk.bn2, stats);
                if blk.act_int.kind.has_slope() {
                    out.push((format!("{p}.act_int"), std::slice::from_ref(&blk.act_int.slope)));
                }
                if blk.act_ext.kind.has_slope() {
                    out.push((format!("{p}.act_ext"), std::slice::from_ref(&blk.act_ext.slope)));
                }
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable counterpart of [`Network::tensors`], same order and names.
    pub fn tensors_mut(&mut self, stats: bool) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = Vec::new();
        out.push(("stem.weight".into(), &mut self.stem.weight));
        push_bn_mut(&mut out, "stem_bn", &mut self.stem_bn, stats);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if let Some((c, b)) = &mut stage.proj {
                out.push((format!("s{s}.proj.weight"), &mut c.weight));
                push_bn_mut(&mut out, &format!("s{s}.proj_bn"), b, stats);
            }
            for (i, blk) in stage.blocks.iter_mut().enumerate() {
                let p = format!("s{s}.b{i}");
                out.push((format!("{p}.conv1"), &mut blk.conv1.weight));
                push_bn_mut(&mut out, &format!("{p}.bn1"), &mut blk.bn1, stats);
                out.push((format!("{p}.conv2"), &mut blk.conv2.weight));
                push_bn_mut(&mut out, &format!("{p}.bn2"), &mut blk.bn2, stats);
                if blk.act_int.kind.has_slope() {
                    out.push((
                        format!("{p}.act_int"),
                        std::slice::from_mut(&mut blk.act_int.slope),
                    ));
                }
                if blk.act_ext.kind.has_slope() {
                    out.push((
                        format!("{p}.act_ext"),
                        std::slice::from_mut(&mut blk.act_ext.slope),
                    ));
                }
            }
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.tensors(false).iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a [f32])>, prefix: &str, bn: &'a BatchNorm, stats: bool) {
    out.push((format!("{prefix}.gamma"), &bn.gamma));
    out.push((format!("{prefix}.beta"), &bn.beta));
    if stats {
        out.push((format!("{prefix}.running_mean"), &bn.running_mean));
        out.push((format!("{prefix}.running_var"), &bn.running_var));
    }
}

fn push_bn_mut<'a>(
    out: &mut Vec<(String, &'a mut [f32])>,
    prefix: &str,
    bn: &'a mut BatchNorm,
    stats: bool,
) {
    out.push((format!("{prefix}.gamma"), &mut bn.gamma));
    out.push((format!("{prefix}.beta"), &mut bn.beta));
    if stats {
        out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
        out.push((format!("{prefix}.running_var"), &mut bn.running_var));
    }
}
