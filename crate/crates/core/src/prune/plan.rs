use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelConsumer, ChannelFlow, Layer, ModelGraph};
use crate::prune::analyse::SparsityReport;

/// Which zero channels a plan removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Every zero channel, whatever constant it still emits.
    #[default]
    Default,
    /// Only channels whose removal leaves the output unchanged.
    Strict,
}

/// Removal verdict for one zero channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelVerdict {
    pub node: usize,
    pub channel: usize,
    /// Activation the channel still carries into its consumer.
    pub constant: f32,
    /// Upper bound on the per-element perturbation caused by dropping it.
    pub bound: f64,
    pub safe: bool,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub node: usize,
    pub c_in: Vec<usize>,
    pub c_out: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerPlan {
    pub fn in_after(&self) -> usize {
        self.in_channels - self.c_in.len()
    }

    pub fn out_after(&self) -> usize {
        self.out_channels - self.c_out.len()
    }
}

/// Input-feature filtering of a linear layer fed by a flattened conv output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearPlan {
    pub node: usize,
    pub conv: usize,
    /// Flattened features per channel.
    pub spatial: usize,
    pub channels: Vec<usize>,
    pub in_features: usize,
}

impl LinearPlan {
    pub fn in_after(&self) -> usize {
        self.in_features - self.channels.len() * self.spatial
    }
}

/// Prunable input/output channels of every conv, plus the linear filters they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
    pub linears: Vec<LinearPlan>,
    pub verdicts: Vec<ChannelVerdict>,
}

impl PrunePlan {
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.c_out.is_empty() && l.c_in.is_empty())
    }

    pub fn layer(&self, node: usize) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.node == node)
    }

    pub fn channels_removed(&self) -> usize {
        self.layers.iter().map(|l| l.c_out.len()).sum()
    }
}

pub fn plan_prune(report: &SparsityReport, model: &ModelGraph) -> Result<PrunePlan> {
    plan_prune_with(report, model, PruneMode::Default)
}

/// Pairs each conv's own zero channels (`C_out`) with those of the conv feeding it (`C_in`).
///
/// A conv keeps all its outputs when it is protected, when its consumer is protected, or when
/// its channels are pinned (fan-out, residual join, model output).
pub fn plan_prune_with(report: &SparsityReport, model: &ModelGraph, mode: PruneMode) -> Result<PrunePlan> {
    let convs = model.conv_nodes();
    if report.layers.len() != convs.len()
        || report.layers.iter().zip(&convs).any(|(l, &c)| {
            l.node != c || l.out_channels != model.node(c).layer.as_conv().expect("conv").out_channels()
        })
    {
        return Err(Error::Structure("sparsity report does not describe this model".into()));
    }
    if let Some(l) = report.layers.iter().find(|l| l.collapsed()) {
        return Err(Error::Collapse { node: l.node, channels: l.out_channels });
    }

    let flows: BTreeMap<usize, ChannelFlow> = model.channel_flows().into_iter().map(|f| (f.conv, f)).collect();
    let mut c_out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut verdicts = Vec::new();
    for l in &report.layers {
        let flow = &flows[&l.node];
        let open = !model.is_protected(l.node)
            && match flow.consumer {
                ChannelConsumer::Conv(k) => !model.is_protected(k),
                ChannelConsumer::Linear { .. } => true,
                ChannelConsumer::Pinned => false,
            };
        let mut keep = Vec::new();
        if open {
            for &ch in &l.zero_out_channels {
                let constant = carried_constant(model, flow, ch);
                let weight_mass = downstream_mass(model, flow, ch);
                let safe = constant == 0.0 || weight_mass == 0.0;
                let removed = safe || mode == PruneMode::Default;
                if removed {
                    keep.push(ch);
                }
                verdicts.push(ChannelVerdict {
                    node: l.node,
                    channel: ch,
                    constant,
                    bound: constant.abs() as f64 * weight_mass,
                    safe,
                    removed,
                });
            }
        }
        c_out.insert(l.node, keep);
    }

    let layers = convs
        .iter()
        .map(|&c| {
            let conv = model.node(c).layer.as_conv().expect("conv");
            LayerPlan {
                node: c,
                c_in: model.conv_predecessor(c).map(|p| c_out[&p].clone()).unwrap_or_default(),
                c_out: c_out[&c].clone(),
                in_channels: conv.in_channels(),
                out_channels: conv.out_channels(),
            }
        })
        .collect();
    let linears = flows
        .values()
        .filter_map(|f| match f.consumer {
            ChannelConsumer::Linear { node, spatial } if !c_out[&f.conv].is_empty() => Some(LinearPlan {
                node,
                conv: f.conv,
                spatial,
                channels: c_out[&f.conv].clone(),
                in_features: linear_in(model, node),
            }),
            _ => None,
        })
        .collect();
    Ok(PrunePlan { layers, linears, verdicts })
}

fn linear_in(model: &ModelGraph, node: usize) -> usize {
    match &model.node(node).layer {
        Layer::Linear(l) => l.in_features(),
        _ => 0,
    }
}

/// The value a zero-weight channel still emits after the channel-wise layers behind its conv.
fn carried_constant(model: &ModelGraph, flow: &ChannelFlow, ch: usize) -> f32 {
    let conv = model.node(flow.conv).layer.as_conv().expect("conv");
    let mut v = conv.bias.as_ref().map_or(0.0, |b| b.data()[ch]);
    for &r in &flow.region {
        match &model.node(r).layer {
            Layer::BatchNorm2d(bn) => {
                let (s, t) = bn.affine()[ch];
                v = v * s + t;
            }
            Layer::ReLU => v = v.max(0.0),
            _ => {}
        }
    }
    v
}

/// Sum of absolute consumer weights that read channel `ch`.
fn downstream_mass(model: &ModelGraph, flow: &ChannelFlow, ch: usize) -> f64 {
    match flow.consumer {
        ChannelConsumer::Conv(k) => {
            let w = &model.node(k).layer.as_conv().expect("conv consumer").weight;
            let (oc, ic) = (w.dim(0), w.dim(1));
            let area = w.len() / (oc * ic);
            (0..oc)
                .flat_map(|o| {
                    let start = (o * ic + ch) * area;
                    w.data()[start..start + area].iter()
                })
                .map(|&x| x.abs() as f64)
                .sum()
        }
        ChannelConsumer::Linear { node, spatial } => match &model.node(node).layer {
            Layer::Linear(l) => {
                let inf = l.in_features();
                (0..l.out_features())
                    .flat_map(|o| l.weight.data()[o * inf + ch * spatial..o * inf + (ch + 1) * spatial].iter())
                    .map(|&x| x.abs() as f64)
                    .sum()
            }
            _ => f64::INFINITY,
        },
        ChannelConsumer::Pinned => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv2d, GraphBuilder, Linear, Pool2d};
    use crate::prune::analyse::analyse_sparsity;
    use crate::tensor::Tensor;

    fn zeroed(shape: &[usize], zero: &[usize]) -> Tensor {
        let per = shape[1..].iter().product::<usize>();
        Tensor::from_fn(shape, |i| if zero.contains(&(i / per)) { 0.0 } else { 0.5 })
    }

    fn two_convs(zero0: &[usize], zero1: &[usize]) -> ModelGraph {
        let mut b = GraphBuilder::new("two", vec![2, 4, 4], 3);
        b.push(Layer::Conv2d(Conv2d::new(zeroed(&[4, 2, 3, 3], zero0), None, 1, 1).unwrap()));
        b.push(Layer::ReLU);
        b.push(Layer::Conv2d(Conv2d::new(zeroed(&[3, 4, 3, 3], zero1), None, 1, 1).unwrap()));
        b.push(Layer::ReLU);
        b.push(Layer::AvgPool2d(Pool2d::new(4, 4)));
        b.push(Layer::Flatten);
        b.push(Layer::Linear(Linear::new(Tensor::ones(&[3, 3]), None).unwrap()));
        b.build().unwrap()
    }

    #[test]
    fn two_conv_chain_trace() {
        let m = two_convs(&[2], &[]);
        let plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        assert_eq!(plan.layers[0].c_in, Vec::<usize>::new());
        assert_eq!(plan.layers[0].c_out, vec![2]);
        assert_eq!(plan.layers[1].c_in, vec![2]);
        assert_eq!(plan.layers[1].c_out, Vec::<usize>::new());
        assert!(plan.linears.is_empty());
        assert!(plan.verdicts.iter().all(|v| v.safe));
    }

    #[test]
    fn last_conv_filters_linear() {
        let m = two_convs(&[], &[0]);
        let plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        assert_eq!(plan.linears.len(), 1);
        assert_eq!(plan.linears[0].channels, vec![0]);
        assert_eq!(plan.linears[0].spatial, 1);
        assert_eq!(plan.linears[0].in_after(), 2);
    }

    #[test]
    fn collapse_is_an_error() {
        let m = two_convs(&[0, 1, 2, 3], &[]);
        match plan_prune(&analyse_sparsity(&m), &m) {
            Err(Error::Collapse { node: 0, channels: 4 }) => {}
            other => panic!("expected collapse, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_keeps_positive_bias_channels() {
        let mut m = two_convs(&[1, 2], &[]);
        if let Layer::Conv2d(c) = &mut m.nodes_mut()[0].layer {
            c.bias = Some(Tensor::new(vec![4], vec![0.0, 0.7, -0.3, 0.0]).unwrap());
        }
        let report = analyse_sparsity(&m);
        let strict = plan_prune_with(&report, &m, PruneMode::Strict).unwrap();
        assert_eq!(strict.layers[0].c_out, vec![2]);
        let default = plan_prune(&report, &m).unwrap();
        assert_eq!(default.layers[0].c_out, vec![1, 2]);
        let v = &default.verdicts[0];
        assert!(!v.safe && v.removed);
        // 0.7 times the 3 * 9 consumer weights of 0.5 that read channel 1.
        assert!((v.bound - 0.7 * 13.5).abs() < 1e-5);
    }

    #[test]
    fn mismatched_report_is_rejected() {
        let m = two_convs(&[], &[]);
        let other = two_convs(&[], &[]);
        let mut r = analyse_sparsity(&other);
        r.layers.pop();
        assert!(matches!(plan_prune(&r, &m), Err(Error::Structure(_))));
    }
}
