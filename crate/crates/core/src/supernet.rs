//! The weight-sharing supernet: configuration, construction, subnet
//! execution and extraction, and checkpoint persistence.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationKind;
use crate::arch_space::{max_arch, ArchSpec, SpaceConfig};
use crate::error::{Error, Result};
use crate::network::{BnMode, InitScheme, NetLayout, Network, SubnetPlan};
use crate::tensor::FeatureMap;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SNLABCKP";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    pub space: SpaceConfig,
    #[serde(default = "default_activation")]
    pub internal_activation: ActivationKind,
    #[serde(default = "default_activation")]
    pub external_activation: ActivationKind,
    pub stem_channels: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

fn default_stem_kernel() -> usize {
    3
}

fn default_input_channels() -> usize {
    3
}

impl SupernetConfig {
    /// ReLU everywhere, stem as wide as the first stage.
    pub fn new(space: SpaceConfig) -> Self {
        SupernetConfig {
            stem_channels: space.stage_base_channels[0],
            space,
            internal_activation: ActivationKind::Relu,
            external_activation: ActivationKind::Relu,
            stem_kernel: 3,
            input_channels: 3,
        }
    }

    pub fn with_external(mut self, act: ActivationKind) -> Self {
        self.external_activation = act;
        self
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout {
            input_channels: self.input_channels,
            stem_channels: self.stem_channels,
            stem_kernel: self.stem_kernel,
            stage_channels: self.space.stage_base_channels.clone(),
            num_classes: self.space.num_classes,
            internal: self.internal_activation,
            external: self.external_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.stem_channels == 0 || self.input_channels == 0 {
            return Err(Error::Domain("stem and input channels must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Domain("stem kernel must be odd".into()));
        }
        Ok(())
    }

    /// Execution plan of `arch`.
    pub fn plan(&self, arch: &ArchSpec) -> Result<SubnetPlan> {
        Ok(SubnetPlan {
            widths: arch.block_widths(&self.space)?,
        })
    }
}

/// Hex SHA-256 of the canonical JSON form of a space.
pub fn space_digest(space: &SpaceConfig) -> String {
    let bytes = serde_json::to_vec(space).expect("space serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Maximal shared weights plus the configuration that slices them.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetState {
    pub config: SupernetConfig,
    pub net: Network,
    pub training: bool,
    /// Incremented on every optimizer step.
    pub version: u64,
}

pub fn build_supernet<R: Rng + ?Sized>(config: &SupernetConfig, rng: &mut R) -> Result<SupernetState> {
    config.validate()?;
    let plan = config.plan(&max_arch(&config.space))?;
    let net = Network::init(&config.layout(), &plan, InitScheme::FanIn, rng)?;
    Ok(SupernetState {
        config: config.clone(),
        net,
        training: true,
        version: 0,
    })
}

impl SupernetState {
    pub fn bn_mode(&self) -> BnMode {
        if self.training {
            BnMode::Batch
        } else {
            BnMode::Running
        }
    }

    pub fn eval_mode(mut self) -> Self {
        self.training = false;
        self
    }

    /// Logits `[N][classes]` of `arch` executed inside the shared weights.
    pub fn forward_subnet(&self, arch: &ArchSpec, batch: &FeatureMap) -> Result<Vec<f32>> {
        self.check_batch(batch)?;
        let plan = self.config.plan(arch)?;
        Ok(self.net.forward(&plan, batch, self.bn_mode())?.logits)
    }

    fn check_batch(&self, batch: &FeatureMap) -> Result<()> {
        let (h, w) = self.config.space.input_resolution;
        if batch.height != h || batch.width != w {
            return Err(Error::Contract(format!(
                "batch is {}x{}, space expects {h}x{w}",
                batch.height, batch.width
            )));
        }
        Ok(())
    }

    /// Number of residual blocks per stage at maximal depth.
    pub fn stage_block_counts(&self) -> Vec<usize> {
        self.net.stages.iter().map(|s| s.blocks.len()).collect()
    }
}

/// A self-contained copy of one subnet's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    pub arch: ArchSpec,
    pub net: Network,
    pub training: bool,
}

impl Subnet {
    pub fn forward(&self, batch: &FeatureMap) -> Result<Vec<f32>> {
        let mode = if self.training { BnMode::Batch } else { BnMode::Running };
        Ok(self.net.forward(&self.net.full_plan(), batch, mode)?.logits)
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }
}

pub fn extract_subnet(state: &SupernetState, arch: &ArchSpec) -> Result<Subnet> {
    let plan = state.config.plan(arch)?;
    Ok(Subnet {
        arch: arch.clone(),
        net: state.net.extract(&plan)?,
        training: state.training,
    })
}

pub fn forward_subnet(state: &SupernetState, arch: &ArchSpec, batch: &FeatureMap) -> Result<Vec<f32>> {
    state.forward_subnet(arch, batch)
}

/// Write `state` as a versioned checkpoint.
///
/// Layout (little endian): magic `SNLABCKP`, format `u32`, 64 hex bytes of
/// the space digest, state version `u64`, config JSON (`u32` length +
/// bytes), tensor count `u32`, then per tensor a `u16`-length UTF-8 name, a
/// `u64` element count and the `f32` values.
pub fn save_checkpoint(state: &SupernetState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    buf.extend_from_slice(space_digest(&state.config.space).as_bytes());
    buf.extend_from_slice(&state.version.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config)?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors = state.net.tensors(true);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint. When `expected_space` is given, the stored space
/// digest must match it.
pub fn load_checkpoint(path: &Path, expected_space: Option<&SpaceConfig>) -> Result<SupernetState> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let format = cur.u32()?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format version {format}")));
    }
    let digest = String::from_utf8(cur.take(64)?.to_vec())
        .map_err(|_| Error::Checkpoint("digest is not ASCII".into()))?;
    if let Some(space) = expected_space {
        let want = space_digest(space);
        if digest != want {
            return Err(Error::Checkpoint(format!(
                "space digest {digest} does not match expected {want}"
            )));
        }
    }
    let version = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let config: SupernetConfig = serde_json::from_slice(cur.take(cfg_len)?)?;
    if space_digest(&config.space) != digest {
        return Err(Error::Checkpoint("embedded config does not match digest".into()));
    }
    // rebuild the skeleton, then overwrite every tensor
    let mut state = build_supernet(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = cur.u32()? as usize;
    let mut tensors = state.net.tensors_mut(true);
    if count != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            tensors.len()
        )));
    }
    for (name, t) in tensors.iter_mut() {
        let n = cur.u16()? as usize;
        let stored = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if stored != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {stored}")));
        }
        let len = cur.u64()? as usize;
        if len != t.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: {len} values stored, expected {}",
                t.len()
            )));
        }
        for (v, chunk) in t.iter_mut().zip(cur.take(len * 4)?.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(tensors);
    if cur.pos != data.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    state.version = version;
    state.training = false;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_space::{enumerate_space, min_arch};

    fn toy() -> SupernetConfig {
        SupernetConfig::new(SpaceConfig::toy())
    }

    fn batch(n: usize) -> FeatureMap {
        let mut x = FeatureMap::zeros(3, n, 8, 8);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 7919 % 113) as f32 / 56.0) - 1.0;
        }
        x
    }

    #[test]
    fn block_counts() {
        let s = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.stage_block_counts(), vec![2, 2]);
        let paper = SupernetConfig::new(SpaceConfig::paper_scale());
        let plan = paper.plan(&max_arch(&paper.space)).unwrap();
        assert_eq!(plan.widths.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 8, 5]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_toy_arch_yields_logits() {
        let s = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap().eval_mode();
        let x = batch(2);
        for arch in enumerate_space(&s.config.space, 1000).unwrap() {
            let logits = s.forward_subnet(&arch, &x).unwrap();
            assert_eq!(logits.len(), 2 * 10);
            assert!(logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn extracted_subnet_matches_sliced_forward() {
        let s = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap().eval_mode();
        let x = batch(3);
        for arch in [max_arch(&s.config.space), min_arch(&s.config.space)] {
            let a = s.forward_subnet(&arch, &x).unwrap();
            let sub = extract_subnet(&s, &arch).unwrap();
            let b = sub.forward(&x).unwrap();
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "{arch}: {diff}");
        }
        let full = extract_subnet(&s, &max_arch(&s.config.space)).unwrap();
        assert_eq!(full.num_params(), s.net.num_params());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let s = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = FeatureMap::zeros(3, 1, 4, 4);
        assert!(s.forward_subnet(&max_arch(&s.config.space), &x).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_digest_check() {
        let dir = std::env::temp_dir().join(format!("snlab-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let mut s = build_supernet(&toy(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        s.version = 17;
        s.net.stem_bn.running_mean[0] = 0.25;
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path, Some(&s.config.space)).unwrap();
        assert_eq!(back.net, s.net);
        assert_eq!(back.version, 17);
        assert!(!back.training);
        let mut other = SpaceConfig::toy();
        other.num_classes = 5;
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::Checkpoint(_))
        ));
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
