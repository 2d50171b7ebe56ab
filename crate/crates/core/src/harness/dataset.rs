//! Dataset specifications: seeded synthetic blob images or a directory of
//! class folders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PIXEL_MEAN, PIXEL_STD};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Class-conditional Gaussian-blob images.
    Synthetic {
        #[serde(default = "default_parts")]
        parts: usize,
        #[serde(default = "default_parts_per_class")]
        parts_per_class: usize,
        #[serde(default = "default_prototypes")]
        prototypes: usize,
        /// Standard deviation of per-pixel noise, in pixel units.
        #[serde(default = "default_noise")]
        noise: f64,
        /// Standard deviation of per-sample blob displacement, in pixels.
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    /// `root/<class>/<image>`; class folders in sorted order give the labels.
    Directory { path: PathBuf },
}

fn default_parts() -> usize {
    16
}
fn default_parts_per_class() -> usize {
    3
}
fn default_prototypes() -> usize {
    8
}
fn default_noise() -> f64 {
    0.05
}
fn default_jitter() -> f64 {
    0.7
}

impl DataSource {
    pub fn synthetic() -> Self {
        DataSource::Synthetic {
            parts: default_parts(),
            parts_per_class: default_parts_per_class(),
            prototypes: default_prototypes(),
            noise: default_noise(),
            jitter: default_jitter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub num_classes: usize,
    pub resolution: (usize, usize),
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub train_count: usize,
    pub val_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

impl DatasetSpec {
    /// 10 classes of 8x8 synthetic images, 2000 train / 400 val.
    pub fn toy(seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::synthetic(),
            num_classes: 10,
            resolution: (8, 8),
            channels: 3,
            train_count: 2000,
            val_count: 400,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.train_count == 0
            || self.val_count == 0
            || self.channels == 0
            || self.resolution.0 == 0
            || self.resolution.1 == 0
        {
            return Err(Error::Config(
                "dataset counts, classes, channels and resolution must be positive".into(),
            ));
        }
        match &self.source {
            DataSource::Synthetic {
                parts,
                parts_per_class,
                prototypes,
                noise,
                jitter,
            } => {
                if *parts_per_class == 0 || parts_per_class > parts || *prototypes == 0 {
                    return Err(Error::Config(
                        "synthetic source needs 0 < parts_per_class <= parts and prototypes > 0".into(),
                    ));
                }
                if !(*noise >= 0.0) || !(*jitter >= 0.0) {
                    return Err(Error::Config("noise and jitter must be >= 0".into()));
                }
            }
            DataSource::Directory { path } => {
                if !path.is_dir() {
                    return Err(Error::io(
                        path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Train and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Load or generate the data described by `spec`.
pub fn ingest_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    match &spec.source {
        DataSource::Synthetic { .. } => Ok(synthesize(spec)),
        DataSource::Directory { path } => load_directory(spec, path),
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
}

/// Each class is a few prototypes; a prototype is a set of blobs drawn from
/// a pool shared by all classes, each with its own colour. Classes therefore
/// overlap in their parts and differ in combinations.
fn synthesize(spec: &DatasetSpec) -> Splits {
    let DataSource::Synthetic {
        parts,
        parts_per_class,
        prototypes,
        noise,
        jitter,
    } = spec.source.clone()
    else {
        unreachable!("synthesize on a synthetic source")
    };
    let (h, w) = spec.resolution;
    let c = spec.channels;
    let mut rng = rng_for(spec.seed, 0xda7a);
    let pool: Vec<Blob> = (0..parts)
        .map(|_| Blob {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            sigma: rng.random_range(0.6..1.6) * (h.min(w) as f64 / 8.0),
        })
        .collect();
    let mut index: Vec<usize> = (0..parts).collect();
    // per class, per prototype: (pool index, colour) pairs
    let classes: Vec<Vec<Vec<(usize, Vec<f64>)>>> = (0..spec.num_classes)
        .map(|_| {
            (0..prototypes)
                .map(|_| {
                    index.shuffle(&mut rng);
                    index[..parts_per_class]
                        .iter()
                        .map(|&p| (p, (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()))
                        .collect()
                })
                .collect()
        })
        .collect();
    let jitter_dist = Normal::new(0.0, jitter).expect("jitter >= 0");
    let per = c * h * w;
    let make = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut images = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.num_classes;
            let proto = &classes[label][rng.random_range(0..prototypes)];
            let mut img = vec![0.0f64; per];
            for (p, colour) in proto {
                let b = pool[*p];
                let (cy, cx) = (b.cy + jitter_dist.sample(rng), b.cx + jitter_dist.sample(rng));
                let amp: f64 = rng.random_range(0.6..1.4);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let g = amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                        for ch in 0..c {
                            img[(ch * h + y) * w + x] += 0.25 * g * colour[ch];
                        }
                    }
                }
            }
            for v in &mut img {
                let n: f64 = StandardNormal.sample(rng);
                let pixel = (0.5 + *v + noise * n).clamp(0.0, 1.0);
                images.push(((pixel as f32) - PIXEL_MEAN) / PIXEL_STD);
            }
            labels.push(label);
        }
        (images, labels)
    };
    let mut train_rng = rng_for(spec.seed, 0xda7b);
    let mut val_rng = rng_for(spec.seed, 0xda7c);
    let (ti, tl) = make(spec.train_count, &mut train_rng);
    let (vi, vl) = make(spec.val_count, &mut val_rng);
    Splits {
        train: Dataset::new(c, h, w, spec.num_classes, ti, tl).expect("consistent synthetic sizes"),
        val: Dataset::new(c, h, w, spec.num_classes, vi, vl).expect("consistent synthetic sizes"),
    }
}

fn load_directory(spec: &DatasetSpec, root: &Path) -> Result<Splits> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() != spec.num_classes {
        return Err(Error::Config(format!(
            "{} has {} class folders, spec says {}",
            root.display(),
            class_dirs.len(),
            spec.num_classes
        )));
    }
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (p, label)));
    }
    let need = spec.train_count + spec.val_count;
    if files.len() < need {
        return Err(Error::Config(format!(
            "{} holds {} images, spec needs {need}",
            root.display(),
            files.len()
        )));
    }
    files.shuffle(&mut rng_for(spec.seed, 0xd1));
    let (h, w) = spec.resolution;
    let c = spec.channels;
    let load = |subset: &[(PathBuf, usize)]| -> Result<Dataset> {
        let mut images = Vec::with_capacity(subset.len() * c * h * w);
        let mut labels = Vec::with_capacity(subset.len());
        for (path, label) in subset {
            images.extend(load_image(path, c, h, w)?);
            labels.push(*label);
        }
        Dataset::new(c, h, w, spec.num_classes, images, labels)
    };
    Ok(Splits {
        val: load(&files[..spec.val_count])?,
        train: load(&files[spec.val_count..need])?,
    })
}

/// Decode, resize and normalize one image to `[C][H][W]`.
fn load_image(path: &Path, c: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let img = img
        .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    if c != 1 && c != 3 {
        return Err(Error::Config(format!(
            "directory datasets support 1 or 3 channels, got {c}"
        )));
    }
    let mut out = vec![0.0f32; c * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if c == 1 {
            let g = (px[0] as f32 + px[1] as f32 + px[2] as f32) / (3.0 * 255.0);
            out[y * w + x] = (g - PIXEL_MEAN) / PIXEL_STD;
        } else {
            for ch in 0..3 {
                out[(ch * h + y) * w + x] = (px[ch] as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD;
            }
        }
    }
    Ok(out)
}
