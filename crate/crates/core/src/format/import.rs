//! External weight import: a `model.json` manifest listing layers, with one raw little-endian
//! `f32` file per tensor next to it. Conversion scripts for other frameworks only need to emit
//! this layout.
//!
//! ```json
//! { "name": "net", "input_shape": [3, 32, 32], "num_classes": 10,
//!   "layers": [
//!     { "kind": "conv2d", "stride": 1, "padding": 1,
//!       "weight": { "file": "conv0.weight.bin", "shape": [16, 3, 3, 3] }, "bias": null },
//!     { "kind": "relu" },
//!     { "kind": "add", "other": 3, "input": 1 } ] }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchNorm2d, Conv2d, Layer, Linear, ModelGraph, ModelMeta, Node, Pool2d};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d { stride: usize, padding: usize, weight: TensorRef, bias: Option<TensorRef> },
    Batchnorm2d { eps: f32, gamma: TensorRef, beta: TensorRef, running_mean: TensorRef, running_var: TensorRef },
    Linear { weight: TensorRef, bias: Option<TensorRef> },
    Relu,
    Maxpool2d { kernel: usize, stride: usize },
    Avgpool2d { kernel: usize, stride: usize },
    Flatten,
    Add { other: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(flatten)]
    pub layer: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportManifest {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<NodeSpec>,
}

fn load_tensor(dir: &Path, r: &TensorRef) -> Result<Tensor> {
    let path = dir.join(&r.file);
    let raw = fs::read(&path)?;
    let expected: usize = r.shape.iter().product::<usize>() * 4;
    if raw.len() != expected {
        return Err(Error::format(
            raw.len().min(expected),
            format!("{}: {} bytes for shape {:?} (expected {expected})", r.file, raw.len(), r.shape),
        ));
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| Error::format(0, format!("{}: {e}", r.file)))
}

/// Reads `dir/model.json` and its tensor files.
pub fn import_dir(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest: ImportManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let load = |r: &TensorRef| load_tensor(dir, r);
    let mut nodes = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let layer = match &spec.layer {
            LayerSpec::Conv2d { stride, padding, weight, bias } => Layer::Conv2d(Conv2d::new(
                load(weight)?,
                bias.as_ref().map(load).transpose()?,
                *stride,
                *padding,
            )?),
            LayerSpec::Batchnorm2d { eps, gamma, beta, running_mean, running_var } => {
                Layer::BatchNorm2d(BatchNorm2d {
                    gamma: load(gamma)?,
                    beta: load(beta)?,
                    running_mean: load(running_mean)?,
                    running_var: load(running_var)?,
                    eps: *eps,
                })
            }
            LayerSpec::Linear { weight, bias } => {
                Layer::Linear(Linear::new(load(weight)?, bias.as_ref().map(load).transpose()?)?)
            }
            LayerSpec::Relu => Layer::ReLU,
            LayerSpec::Maxpool2d { kernel, stride } => Layer::MaxPool2d(Pool2d::new(*kernel, *stride)),
            LayerSpec::Avgpool2d { kernel, stride } => Layer::AvgPool2d(Pool2d::new(*kernel, *stride)),
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Add { other } => Layer::Add { other: *other },
        };
        nodes.push(Node { layer, input: spec.input });
    }
    let meta = ModelMeta::new(manifest.name, manifest.input_shape, manifest.num_classes);
    ModelGraph::new(meta, nodes)
}

/// Writes `model` in the import layout.
pub fn export_dir(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let save = |node: usize, name: &str, t: &Tensor| -> Result<TensorRef> {
        let file = format!("node{node}.{name}.bin");
        let mut raw = Vec::with_capacity(t.byte_len());
        t.data().iter().for_each(|v| raw.extend_from_slice(&v.to_le_bytes()));
        fs::write(dir.join(&file), raw)?;
        Ok(TensorRef { file, shape: t.shape().to_vec() })
    };
    let mut layers = Vec::new();
    for (i, node) in model.nodes().iter().enumerate() {
        let layer = match &node.layer {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                stride: c.stride,
                padding: c.padding,
                weight: save(i, "weight", &c.weight)?,
                bias: c.bias.as_ref().map(|b| save(i, "bias", b)).transpose()?,
            },
            Layer::BatchNorm2d(bn) => LayerSpec::Batchnorm2d {
                eps: bn.eps,
                gamma: save(i, "gamma", &bn.gamma)?,
                beta: save(i, "beta", &bn.beta)?,
                running_mean: save(i, "running_mean", &bn.running_mean)?,
                running_var: save(i, "running_var", &bn.running_var)?,
            },
            Layer::Linear(l) => LayerSpec::Linear {
                weight: save(i, "weight", &l.weight)?,
                bias: l.bias.as_ref().map(|b| save(i, "bias", b)).transpose()?,
            },
            Layer::ReLU => LayerSpec::Relu,
            Layer::MaxPool2d(p) => LayerSpec::Maxpool2d { kernel: p.kernel, stride: p.stride },
            Layer::AvgPool2d(p) => LayerSpec::Avgpool2d { kernel: p.kernel, stride: p.stride },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Add { other } => LayerSpec::Add { other: *other },
        };
        layers.push(NodeSpec { layer, input: node.input });
    }
    let manifest = ImportManifest {
        name: model.meta.name.clone(),
        input_shape: model.meta.input_shape.clone(),
        num_classes: model.meta.num_classes,
        layers,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{architecture, Architecture};

    #[test]
    fn export_then_import_reproduces_model() {
        let m = architecture(Architecture::ToyResnet, [3, 8, 8], 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dir(&m, dir.path()).unwrap();
        let back = import_dir(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn short_blob_is_a_format_error() {
        let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dir(&m, dir.path()).unwrap();
        let f = dir.path().join("node0.weight.bin");
        let mut raw = fs::read(&f).unwrap();
        raw.truncate(raw.len() - 4);
        fs::write(&f, raw).unwrap();
        assert!(matches!(import_dir(dir.path()), Err(Error::Format { .. })));
    }
}
