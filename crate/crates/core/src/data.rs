//! Datasets: the bundled synthetic image set and a raw-tensor directory loader.
//!
//! Raw directory layout: `meta.json` (`{"sample_shape": [C, H, W], "num_classes": K}`), plus
//! `train_x.bin` / `test_x.bin` (little-endian `f32`, sample-major) and `train_y.bin` / `test_y.bin`
//! (little-endian `u32` labels).

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Regression targets `[N, outputs]`.
    Values(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
    num_classes: usize,
}

impl Dataset {
    pub fn classification(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.dim(0) != labels.len() {
            return Err(Error::Dataset(format!(
                "{} samples but {} labels",
                inputs.dim(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(Dataset { inputs, targets: Targets::Classes(labels), num_classes })
    }

    pub fn regression(inputs: Tensor, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.dim(0) != inputs.dim(0) {
            return Err(Error::Dataset(format!(
                "regression targets {:?} do not match {} samples",
                values.shape(),
                inputs.dim(0)
            )));
        }
        let k = values.dim(1);
        Ok(Dataset { inputs, targets: Targets::Values(values), num_classes: k })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into a batch tensor and matching targets.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Targets) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * len..(i + 1) * len]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                let k = v.dim(1);
                let mut out = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    out.extend_from_slice(&v.data()[i * k..(i + 1) * k]);
                }
                Targets::Values(Tensor::new(vec![indices.len(), k], out).expect("non-empty batch"))
            }
        };
        (Tensor::new(shape, data).expect("non-empty batch"), targets)
    }
}

/// Disjoint train and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Parameters of the bundled synthetic set: one Gaussian blob per image whose position, colour
/// and stripe texture depend on the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub classes: usize,
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig { classes: 8, size: 32, train_per_class: 64, test_per_class: 32, noise: 0.25, seed: 7 }
    }
}

struct ClassStyle {
    center: (f32, f32),
    color: [f32; 3],
    freq: f32,
    angle: f32,
}

fn class_styles(cfg: &BlobConfig) -> Vec<ClassStyle> {
    let s = cfg.size as f32;
    (0..cfg.classes)
        .map(|k| {
            let theta = 2.0 * PI * k as f32 / cfg.classes as f32;
            let radius = 0.28 * s;
            let hue = |off: f32| 0.6 + 0.4 * (theta + off).cos();
            ClassStyle {
                center: (s / 2.0 + radius * theta.sin(), s / 2.0 + radius * theta.cos()),
                color: [hue(0.0), hue(2.1), hue(4.2)],
                freq: 0.6 + 0.15 * (k % 4) as f32,
                angle: PI * (k % 3) as f32 / 3.0,
            }
        })
        .collect()
}

fn render(cfg: &BlobConfig, style: &ClassStyle, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let s = cfg.size;
    let noise = Normal::new(0.0f32, cfg.noise).expect("finite noise");
    let jitter = 0.06 * s as f32;
    let cy = style.center.0 + rng.random_range(-jitter..jitter);
    let cx = style.center.1 + rng.random_range(-jitter..jitter);
    let sigma = 0.14 * s as f32 * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (style.angle.cos(), style.angle.sin());
    for color in style.color {
        for y in 0..s {
            for x in 0..s {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let stripes = 1.0 + 0.5 * (style.freq * (dx * ca + dy * sa) + phase).sin();
                out.push(color * blob * stripes + noise.sample(rng));
            }
        }
    }
}

/// Deterministic synthetic split for `cfg`; sample order interleaves classes.
pub fn synthetic_blobs(cfg: &BlobConfig) -> DataSplit {
    let styles = class_styles(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |per_class: usize| {
        let n = per_class * cfg.classes;
        let mut data = Vec::with_capacity(n * 3 * cfg.size * cfg.size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % cfg.classes;
            render(cfg, &styles[k], &mut rng, &mut data);
            labels.push(k);
        }
        let inputs = Tensor::new(vec![n, 3, cfg.size, cfg.size], data).expect("consistent");
        Dataset::classification(inputs, labels, cfg.classes).expect("labels in range")
    };
    let train = make(cfg.train_per_class);
    let test = make(cfg.test_per_class);
    DataSplit { train, test }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMeta {
    sample_shape: Vec<usize>,
    num_classes: usize,
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::format(raw.len(), format!("{}: length not a multiple of 4", path.display())));
    }
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_split(dir: &Path, prefix: &str, meta: &RawMeta) -> Result<Dataset> {
    let x = read_f32(&dir.join(format!("{prefix}_x.bin")))?;
    let y_raw = fs::read(dir.join(format!("{prefix}_y.bin")))?;
    if y_raw.len() % 4 != 0 {
        return Err(Error::format(y_raw.len(), format!("{prefix}_y.bin: length not a multiple of 4")));
    }
    let labels: Vec<usize> = y_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&meta.sample_shape);
    let inputs = Tensor::new(shape, x)
        .map_err(|e| Error::Dataset(format!("{prefix}_x.bin does not match labels: {e}")))?;
    Dataset::classification(inputs, labels, meta.num_classes)
}

pub fn load_raw_dir(dir: impl AsRef<Path>) -> Result<DataSplit> {
    let dir = dir.as_ref();
    let meta: RawMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let train = read_split(dir, "train", &meta)?;
    let test = read_split(dir, "test", &meta)?;
    Ok(DataSplit { train, test })
}

pub fn save_raw_dir(split: &DataSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = RawMeta { sample_shape: split.train.sample_shape().to_vec(), num_classes: split.train.num_classes() };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    for (prefix, ds) in [("train", &split.train), ("test", &split.test)] {
        let labels = ds.labels().ok_or_else(|| Error::Dataset("only class labels can be saved".into()))?;
        let mut x = Vec::with_capacity(ds.inputs().byte_len());
        ds.inputs().data().iter().for_each(|v| x.extend_from_slice(&v.to_le_bytes()));
        fs::write(dir.join(format!("{prefix}_x.bin")), x)?;
        let y: Vec<u8> = labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
        fs::write(dir.join(format!("{prefix}_y.bin")), y)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let cfg = BlobConfig { train_per_class: 4, test_per_class: 2, ..Default::default() };
        let a = synthetic_blobs(&cfg);
        let b = synthetic_blobs(&cfg);
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.test.len(), 16);
        assert_eq!(a.train.sample_shape(), &[3, 32, 32]);
        let labels = a.train.labels().unwrap();
        for k in 0..8 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 4);
        }
        assert_ne!(a.train.inputs().data()[..100], a.test.inputs().data()[..100]);
    }

    #[test]
    fn raw_dir_round_trip() {
        let cfg = BlobConfig { train_per_class: 2, test_per_class: 1, size: 8, ..Default::default() };
        let split = synthetic_blobs(&cfg);
        let dir = tempfile::tempdir().unwrap();
        save_raw_dir(&split, dir.path()).unwrap();
        assert_eq!(load_raw_dir(dir.path()).unwrap(), split);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(Dataset::classification(x, vec![0, 3], 3).is_err());
    }
}
