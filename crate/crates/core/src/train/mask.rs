use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Keep/drop flags for one prunable weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub node: usize,
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl MaskEntry {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// One entry per conv and linear weight, in node order. Biases and batchnorm parameters are never masked.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparsityMask {
    entries: Vec<MaskEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingScope {
    /// One magnitude ranking across every prunable tensor.
    #[default]
    Global,
    /// Each tensor ranked and thinned on its own.
    PerLayer,
}

impl SparsityMask {
    pub fn from_entries(entries: Vec<MaskEntry>) -> Result<Self> {
        for e in &entries {
            if e.shape.iter().product::<usize>() != e.keep.len() {
                return Err(Error::Config(format!(
                    "mask for node {} has {} flags for shape {:?}",
                    e.node,
                    e.keep.len(),
                    e.shape
                )));
            }
        }
        Ok(SparsityMask { entries })
    }

    /// Keeps everything.
    pub fn ones(model: &ModelGraph) -> Self {
        Self::build(model, |_| true)
    }

    /// Keeps exactly the nonzero weights of `model`.
    pub fn from_nonzero(model: &ModelGraph) -> Self {
        Self::build(model, |v| v != 0.0)
    }

    fn build(model: &ModelGraph, keep: impl Fn(f32) -> bool) -> Self {
        let entries = model
            .nodes()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.layer.prunable_weight().map(|w| (i, w)))
            .map(|(node, w)| MaskEntry {
                node,
                shape: w.shape().to_vec(),
                keep: w.data().iter().map(|&v| keep(v)).collect(),
            })
            .collect();
        SparsityMask { entries }
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.keep.len()).sum()
    }

    pub fn kept(&self) -> usize {
        self.entries.iter().map(MaskEntry::kept).sum()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.total().max(1) as f64
    }

    /// Nodes whose weight tensor is fully masked.
    pub fn collapsed_nodes(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.kept() == 0).map(|e| e.node).collect()
    }

    /// Whether every weight kept here is also kept by `other`.
    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.node == b.node
                    && a.keep.len() == b.keep.len()
                    && a.keep.iter().zip(&b.keep).all(|(&x, &y)| !x || y)
            })
    }

    pub fn check_matches(&self, model: &ModelGraph) -> Result<()> {
        let prunable: Vec<(usize, &[usize])> = model
            .nodes()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.layer.prunable_weight().map(|w| (i, w.shape())))
            .collect();
        let ok = prunable.len() == self.entries.len()
            && prunable
                .iter()
                .zip(&self.entries)
                .all(|((i, s), e)| *i == e.node && *s == e.shape.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("mask does not match the model's prunable tensors".into()))
        }
    }

    /// Zeroes every masked weight in place.
    pub fn apply(&self, model: &mut ModelGraph) {
        for e in &self.entries {
            let w = model.nodes_mut()[e.node]
                .layer
                .prunable_weight_mut()
                .expect("mask entry points at a prunable tensor");
            for (v, &k) in w.data_mut().iter_mut().zip(&e.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Number of survivors when keeping `keep_fraction` of `remaining` weights.
fn survivors(remaining: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * remaining as f64) + 1e-9).floor() as usize
}

/// Masks the smallest-magnitude `1 - keep_fraction` of the currently kept conv and linear weights,
/// ranked across all layers.
pub fn rank_and_mask(model: &ModelGraph, current: &SparsityMask, keep_fraction: f64) -> Result<SparsityMask> {
    rank_and_mask_scoped(model, current, keep_fraction, RankingScope::Global)
}

/// Ties on magnitude are broken by ascending flat index (position in node-ordered concatenation
/// of the prunable tensors): the lower index is masked first.
pub fn rank_and_mask_scoped(
    model: &ModelGraph,
    current: &SparsityMask,
    keep_fraction: f64,
    scope: RankingScope,
) -> Result<SparsityMask> {
    if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside (0, 1)")));
    }
    current.check_matches(model)?;
    let weights: Vec<&[f32]> = current
        .entries
        .iter()
        .map(|e| model.node(e.node).layer.prunable_weight().expect("checked").data())
        .collect();
    let mut next = current.clone();

    let thin = |candidates: Vec<(f32, usize, usize, usize)>, next: &mut SparsityMask| {
        let mut candidates = candidates;
        let drop = candidates.len() - survivors(candidates.len(), keep_fraction);
        candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, _, entry, idx) in &candidates[..drop] {
            next.entries[entry].keep[idx] = false;
        }
    };

    let collect = |entries: std::ops::Range<usize>| {
        let mut offset: usize = current.entries[..entries.start].iter().map(|e| e.keep.len()).sum();
        let mut out = Vec::new();
        for ei in entries {
            let e = &current.entries[ei];
            for (idx, (&k, &v)) in e.keep.iter().zip(weights[ei]).enumerate() {
                if k {
                    out.push((v.abs(), offset + idx, ei, idx));
                }
            }
            offset += e.keep.len();
        }
        out
    };

    match scope {
        RankingScope::Global => thin(collect(0..current.entries.len()), &mut next),
        RankingScope::PerLayer => {
            for ei in 0..current.entries.len() {
                thin(collect(ei..ei + 1), &mut next);
            }
        }
    }

    for node in next.collapsed_nodes() {
        if !current.collapsed_nodes().contains(&node) {
            log::warn!("layer collapse: every weight of node {node} is now masked");
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv2d, GraphBuilder, Layer};
    use crate::tensor::Tensor;

    fn model_with(weights: &[f32]) -> ModelGraph {
        let mut b = GraphBuilder::new("m", vec![1, 1, 1], 1);
        let w = Tensor::new(vec![weights.len(), 1, 1, 1], weights.to_vec()).unwrap();
        b.push(Layer::Conv2d(Conv2d::new(w, None, 1, 0).unwrap()));
        b.build().unwrap()
    }

    fn kept_values(m: &ModelGraph, mask: &SparsityMask) -> Vec<f32> {
        let w = m.node(0).layer.prunable_weight().unwrap().data();
        mask.entries()[0].keep.iter().zip(w).filter(|(k, _)| **k).map(|(_, v)| *v).collect()
    }

    #[test]
    fn keeps_largest_magnitudes() {
        let m = model_with(&[1.0, -3.0, 2.0, -4.0]);
        let mask = rank_and_mask(&m, &SparsityMask::ones(&m), 0.5).unwrap();
        assert_eq!(kept_values(&m, &mask), vec![-3.0, -4.0]);
    }

    #[test]
    fn ties_mask_lower_indices_first() {
        let m = model_with(&[1.0; 6]);
        let mask = rank_and_mask(&m, &SparsityMask::ones(&m), 0.5).unwrap();
        assert_eq!(mask.entries()[0].keep, vec![false, false, false, true, true, true]);
    }

    #[test]
    fn rejects_degenerate_fractions() {
        let m = model_with(&[1.0, 2.0]);
        for f in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(rank_and_mask(&m, &SparsityMask::ones(&m), f).is_err());
        }
    }

    #[test]
    fn per_layer_scope_thins_each_tensor() {
        let mut b = GraphBuilder::new("m", vec![1, 1, 1], 1);
        let big = Tensor::new(vec![4, 1, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let small = Tensor::new(vec![2, 4, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        b.push(Layer::Conv2d(Conv2d::new(big, None, 1, 0).unwrap()));
        b.push(Layer::Conv2d(Conv2d::new(small, None, 1, 0).unwrap()));
        let m = b.build().unwrap();
        let global = rank_and_mask(&m, &SparsityMask::ones(&m), 0.5).unwrap();
        assert_eq!(global.entries()[1].kept(), 2);
        assert_eq!(global.entries()[0].kept(), 4);
        let local = rank_and_mask_scoped(&m, &SparsityMask::ones(&m), 0.5, RankingScope::PerLayer).unwrap();
        assert_eq!(local.entries()[0].kept(), 2);
        assert_eq!(local.entries()[1].kept(), 4);
    }
}
