//! `.dms` binary model format (all integers little-endian):
//!
//! ```text
//! "DNMS"  u16 version  u32 manifest_len  manifest (UTF-8 JSON: name, input_shape, num_classes, metrics)
//! u32 node_count, then per node:
//!     u8 kind  i32 input (-1: previous node)  i32 conv predecessor (-1: none)  u8 flags (1: protected, 2: has bias)
//!     kind-specific fields: conv u32 stride, u32 padding | batchnorm f32 eps | pool u32 kernel, u32 stride | add u32 other
//! u32 tensor_count, then per tensor in node order:
//!     u8 rank  u32 dims[rank]  f32 data[product(dims)]
//! ```
//!
//! Tensor order within a node: conv weight, bias; batchnorm gamma, beta, running mean, running var;
//! linear weight, bias.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::bytes::{put_f32s, Reader};
use crate::error::{Error, Result};
use crate::model::{BatchNorm2d, Conv2d, Layer, Linear, ModelGraph, ModelMeta, Node, Pool2d};
use crate::tensor::Tensor;

pub const DMS_MAGIC: &[u8; 4] = b"DNMS";
pub const DMS_VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_BN: u8 = 1;
const KIND_LINEAR: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_MAXPOOL: u8 = 4;
const KIND_AVGPOOL: u8 = 5;
const KIND_FLATTEN: u8 = 6;
const KIND_ADD: u8 = 7;

const FLAG_PROTECTED: u8 = 1;
const FLAG_BIAS: u8 = 2;

pub fn serialize(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DMS_MAGIC);
    out.extend_from_slice(&DMS_VERSION.to_le_bytes());
    let manifest = serde_json::to_vec(&model.meta).expect("metadata serialises");
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);

    out.extend_from_slice(&(model.len() as u32).to_le_bytes());
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (i, node) in model.nodes().iter().enumerate() {
        let input = node.input.map_or(-1, |s| s as i32);
        let pred = model.conv_predecessor(i).map_or(-1, |p| p as i32);
        let mut flags = 0u8;
        if model.is_protected(i) {
            flags |= FLAG_PROTECTED;
        }
        let kind = match &node.layer {
            Layer::Conv2d(c) => {
                if c.bias.is_some() {
                    flags |= FLAG_BIAS;
                }
                KIND_CONV
            }
            Layer::BatchNorm2d(_) => KIND_BN,
            Layer::Linear(l) => {
                if l.bias.is_some() {
                    flags |= FLAG_BIAS;
                }
                KIND_LINEAR
            }
            Layer::ReLU => KIND_RELU,
            Layer::MaxPool2d(_) => KIND_MAXPOOL,
            Layer::AvgPool2d(_) => KIND_AVGPOOL,
            Layer::Flatten => KIND_FLATTEN,
            Layer::Add { .. } => KIND_ADD,
        };
        out.push(kind);
        out.extend_from_slice(&input.to_le_bytes());
        out.extend_from_slice(&pred.to_le_bytes());
        out.push(flags);
        match &node.layer {
            Layer::Conv2d(c) => {
                out.extend_from_slice(&(c.stride as u32).to_le_bytes());
                out.extend_from_slice(&(c.padding as u32).to_le_bytes());
                tensors.push(&c.weight);
                tensors.extend(c.bias.as_ref());
            }
            Layer::BatchNorm2d(bn) => {
                out.extend_from_slice(&bn.eps.to_le_bytes());
                tensors.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
            }
            Layer::Linear(l) => {
                tensors.push(&l.weight);
                tensors.extend(l.bias.as_ref());
            }
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                out.extend_from_slice(&(p.kernel as u32).to_le_bytes());
                out.extend_from_slice(&(p.stride as u32).to_le_bytes());
            }
            Layer::Add { other } => out.extend_from_slice(&(*other as u32).to_le_bytes()),
            Layer::ReLU | Layer::Flatten => {}
        }
    }

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    out
}

struct NodeHeader {
    kind: u8,
    input: Option<usize>,
    pred: Option<usize>,
    flags: u8,
    ints: [u32; 2],
    eps: f32,
    offset: usize,
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != DMS_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"DNMS\"")));
    }
    let version = r.u16()?;
    if version != DMS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let manifest_len = r.u32()? as usize;
    let manifest_at = r.pos();
    let manifest = r.take(manifest_len)?;
    let meta: ModelMeta = serde_json::from_slice(manifest)
        .map_err(|e| Error::format(manifest_at, format!("manifest: {e}")))?;

    let node_count = r.u32()? as usize;
    if node_count > r.remaining() {
        return Err(Error::format(r.pos() - 4, format!("node count {node_count} exceeds payload")));
    }
    let mut headers = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let offset = r.pos();
        let kind = r.u8()?;
        let input = r.i32()?;
        let pred = r.i32()?;
        let flags = r.u8()?;
        let opt = |v: i32| -> Result<Option<usize>> {
            match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                v => Err(Error::format(offset, format!("negative node reference {v}"))),
            }
        };
        let mut h = NodeHeader {
            kind,
            input: opt(input)?,
            pred: opt(pred)?,
            flags,
            ints: [0, 0],
            eps: 0.0,
            offset,
        };
        match kind {
            KIND_CONV | KIND_MAXPOOL | KIND_AVGPOOL => h.ints = [r.u32()?, r.u32()?],
            KIND_BN => h.eps = r.f32()?,
            KIND_ADD => h.ints[0] = r.u32()?,
            KIND_LINEAR | KIND_RELU | KIND_FLATTEN => {}
            other => return Err(Error::format(offset, format!("unknown layer kind {other}"))),
        }
        headers.push(h);
    }

    let tensor_count = r.u32()? as usize;
    let expected: usize = headers
        .iter()
        .map(|h| match h.kind {
            KIND_CONV | KIND_LINEAR => 1 + usize::from(h.flags & FLAG_BIAS != 0),
            KIND_BN => 4,
            _ => 0,
        })
        .sum();
    if tensor_count != expected {
        return Err(Error::format(
            r.pos() - 4,
            format!("node table implies {expected} tensors, header says {tensor_count}"),
        ));
    }
    let mut next_tensor = || -> Result<Tensor> {
        let at = r.pos();
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(at, format!("tensor rank {rank} outside 1..=4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let data = r.f32_vec(n)?;
        Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))
    };

    let mut nodes = Vec::with_capacity(node_count);
    let mut chain = Vec::with_capacity(node_count);
    let mut protected = BTreeSet::new();
    for (i, h) in headers.iter().enumerate() {
        let has_bias = h.flags & FLAG_BIAS != 0;
        let layer = match h.kind {
            KIND_CONV => {
                let weight = next_tensor()?;
                let bias = if has_bias { Some(next_tensor()?) } else { None };
                Layer::Conv2d(Conv2d { weight, bias, stride: h.ints[0] as usize, padding: h.ints[1] as usize })
            }
            KIND_BN => Layer::BatchNorm2d(BatchNorm2d {
                gamma: next_tensor()?,
                beta: next_tensor()?,
                running_mean: next_tensor()?,
                running_var: next_tensor()?,
                eps: h.eps,
            }),
            KIND_LINEAR => {
                let weight = next_tensor()?;
                let bias = if has_bias { Some(next_tensor()?) } else { None };
                Layer::Linear(Linear { weight, bias })
            }
            KIND_RELU => Layer::ReLU,
            KIND_MAXPOOL => Layer::MaxPool2d(Pool2d::new(h.ints[0] as usize, h.ints[1] as usize)),
            KIND_AVGPOOL => Layer::AvgPool2d(Pool2d::new(h.ints[0] as usize, h.ints[1] as usize)),
            KIND_FLATTEN => Layer::Flatten,
            KIND_ADD => Layer::Add { other: h.ints[0] as usize },
            _ => unreachable!("kind checked while reading the node table"),
        };
        if h.flags & FLAG_PROTECTED != 0 {
            protected.insert(i);
        }
        chain.push(h.pred);
        nodes.push(Node { layer, input: h.input });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos(), format!("{} trailing bytes", r.remaining())));
    }
    let at = headers.first().map_or(0, |h| h.offset);
    ModelGraph::with_structure(meta, nodes, chain, protected)
        .map_err(|e| Error::format(at, format!("inconsistent model: {e}")))
}

pub fn write_model(path: impl AsRef<Path>, model: &ModelGraph) -> Result<()> {
    fs::write(path, serialize(model))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    deserialize(&fs::read(path)?)
}

/// Field-by-field bit equality of two models, including signed zeros.
pub fn bit_identical(a: &ModelGraph, b: &ModelGraph) -> bool {
    serialize(a) == serialize(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphBuilder;

    fn conv_model(bias: bool) -> ModelGraph {
        let mut b = GraphBuilder::new("c", vec![1, 5, 5], 2);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32);
        b.push(Layer::Conv2d(Conv2d::new(w, bias.then(|| Tensor::zeros(&[2])), 1, 0).unwrap()));
        b.build().unwrap()
    }

    #[test]
    fn single_conv_payload_is_header_plus_eighteen_reals() {
        let m = conv_model(false);
        let manifest = serde_json::to_vec(&m.meta).unwrap().len();
        let header = 4 + 2 + 4 + manifest + 4;
        let node = 1 + 4 + 4 + 1 + 8;
        let tensor_header = 4 + 1 + 4 * 4;
        assert_eq!(serialize(&m).len(), header + node + tensor_header + 18 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = serialize(&conv_model(true));
        bytes[0] = b'X';
        assert!(matches!(deserialize(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = serialize(&conv_model(true));
        for cut in [3, 8, 20, bytes.len() - 1] {
            match deserialize(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn inconsistent_tensor_count_is_rejected() {
        let m = conv_model(false);
        let mut bytes = serialize(&m);
        let manifest = serde_json::to_vec(&m.meta).unwrap().len();
        let count_at = 4 + 2 + 4 + manifest + 4 + 18;
        bytes[count_at] = 5;
        assert!(matches!(deserialize(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn relu_only_model_round_trips() {
        let mut b = GraphBuilder::new("r", vec![1, 2, 2], 1);
        b.push(Layer::Conv2d(Conv2d::new(Tensor::ones(&[1, 1, 1, 1]), None, 1, 0).unwrap()));
        b.push(Layer::ReLU);
        let m = b.build().unwrap();
        assert_eq!(deserialize(&serialize(&m)).unwrap(), m);
    }
}
