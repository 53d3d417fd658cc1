use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{BatchNorm2d, ChannelConsumer, Conv2d, Layer, Linear, ModelGraph};
use crate::par;
use crate::prune::plan::PrunePlan;
use crate::tensor::Tensor;

/// Rebuilds every planned layer in one pass. Layers are rebuilt independently (in parallel when
/// enabled) and merged back by node index.
pub fn execute_prune(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    let edits = check_plan(model, plan)?;
    let jobs: Vec<(usize, &Edit)> = edits.iter().map(|(&n, e)| (n, e)).collect();
    let rebuilt = par::map_slice(&jobs, |&(node, edit)| (node, edit.apply(&model.node(node).layer)));
    let mut nodes = model.nodes().to_vec();
    for (node, layer) in rebuilt {
        nodes[node].layer = layer;
    }
    rebuild(model, nodes)
}

/// Applies the same plan one producer at a time in node order: drop a conv's outputs, then the
/// matching inputs of whatever consumes them.
pub fn execute_prune_sequential(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    check_plan(model, plan)?;
    let mut nodes = model.nodes().to_vec();
    let flows: BTreeMap<usize, _> = model.channel_flows().into_iter().map(|f| (f.conv, f)).collect();
    for lp in &plan.layers {
        if lp.c_out.is_empty() {
            continue;
        }
        let out = &lp.c_out;
        nodes[lp.node].layer = Edit::Conv { drop_out: out.clone(), drop_in: vec![] }.apply(&nodes[lp.node].layer);
        let flow = &flows[&lp.node];
        for &r in &flow.region {
            if matches!(nodes[r].layer, Layer::BatchNorm2d(_)) {
                nodes[r].layer = Edit::Bn { drop: out.clone() }.apply(&nodes[r].layer);
            }
        }
        match flow.consumer {
            ChannelConsumer::Conv(k) => {
                nodes[k].layer = Edit::Conv { drop_out: vec![], drop_in: out.clone() }.apply(&nodes[k].layer);
            }
            ChannelConsumer::Linear { node, spatial } => {
                nodes[node].layer = Edit::Linear { drop: out.clone(), spatial }.apply(&nodes[node].layer);
            }
            ChannelConsumer::Pinned => unreachable!("checked by check_plan"),
        }
    }
    rebuild(model, nodes)
}

fn rebuild(model: &ModelGraph, nodes: Vec<crate::model::Node>) -> Result<ModelGraph> {
    ModelGraph::with_structure(
        model.meta.clone(),
        nodes,
        model.conv_chain().to_vec(),
        model.protected().clone(),
    )
}

#[derive(Debug)]
enum Edit {
    Conv { drop_out: Vec<usize>, drop_in: Vec<usize> },
    Bn { drop: Vec<usize> },
    Linear { drop: Vec<usize>, spatial: usize },
}

impl Edit {
    fn apply(&self, layer: &Layer) -> Layer {
        match (self, layer) {
            (Edit::Conv { drop_out, drop_in }, Layer::Conv2d(c)) => Layer::Conv2d(select_conv(c, drop_out, drop_in)),
            (Edit::Bn { drop }, Layer::BatchNorm2d(bn)) => Layer::BatchNorm2d(select_bn(bn, drop)),
            (Edit::Linear { drop, spatial }, Layer::Linear(l)) => Layer::Linear(select_linear(l, drop, *spatial)),
            _ => unreachable!("edit kinds are matched to layer kinds by check_plan"),
        }
    }
}

fn kept(n: usize, drop: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| drop.binary_search(i).is_err()).collect()
}

fn select_conv(conv: &Conv2d, drop_out: &[usize], drop_in: &[usize]) -> Conv2d {
    let (oc, ic) = (conv.out_channels(), conv.in_channels());
    let (kh, kw) = conv.kernel();
    let area = kh * kw;
    let outs = kept(oc, drop_out);
    let ins = kept(ic, drop_in);
    let src = conv.weight.data();
    let mut data = Vec::with_capacity(outs.len() * ins.len() * area);
    for &o in &outs {
        for &i in &ins {
            let start = (o * ic + i) * area;
            data.extend_from_slice(&src[start..start + area]);
        }
    }
    // Input-side filtering never touches the bias.
    let bias = conv.bias.as_ref().map(|b| select_vec(b, &outs));
    Conv2d {
        weight: Tensor::new(vec![outs.len(), ins.len(), kh, kw], data).expect("non-empty selection"),
        bias,
        stride: conv.stride,
        padding: conv.padding,
    }
}

fn select_vec(t: &Tensor, keep: &[usize]) -> Tensor {
    Tensor::new(vec![keep.len()], keep.iter().map(|&i| t.data()[i]).collect()).expect("non-empty selection")
}

fn select_bn(bn: &BatchNorm2d, drop: &[usize]) -> BatchNorm2d {
    let keep = kept(bn.channels(), drop);
    BatchNorm2d {
        gamma: select_vec(&bn.gamma, &keep),
        beta: select_vec(&bn.beta, &keep),
        running_mean: select_vec(&bn.running_mean, &keep),
        running_var: select_vec(&bn.running_var, &keep),
        eps: bn.eps,
    }
}

fn select_linear(l: &Linear, drop: &[usize], spatial: usize) -> Linear {
    let (out, inf) = (l.out_features(), l.in_features());
    let channels = kept(inf / spatial, drop);
    let mut data = Vec::with_capacity(out * channels.len() * spatial);
    for o in 0..out {
        let row = &l.weight.data()[o * inf..(o + 1) * inf];
        for &c in &channels {
            data.extend_from_slice(&row[c * spatial..(c + 1) * spatial]);
        }
    }
    Linear {
        weight: Tensor::new(vec![out, channels.len() * spatial], data).expect("non-empty selection"),
        bias: l.bias.clone(),
    }
}

fn strictly_ascending_below(v: &[usize], n: usize) -> bool {
    v.windows(2).all(|w| w[0] < w[1]) && v.last().is_none_or(|&x| x < n)
}

/// Checks that `plan` fits `model` and collects one edit per touched node.
fn check_plan(model: &ModelGraph, plan: &PrunePlan) -> Result<BTreeMap<usize, Edit>> {
    let bad = |msg: String| Err(Error::Structure(format!("prune plan does not match model: {msg}")));
    let convs = model.conv_nodes();
    if plan.layers.len() != convs.len() || plan.layers.iter().zip(&convs).any(|(l, &c)| l.node != c) {
        return bad("conv layer list differs".into());
    }
    let mut edits = BTreeMap::new();
    for lp in &plan.layers {
        let conv = model.node(lp.node).layer.as_conv().expect("conv node");
        if lp.out_channels != conv.out_channels() || lp.in_channels != conv.in_channels() {
            return bad(format!("node {} channel counts", lp.node));
        }
        if !strictly_ascending_below(&lp.c_out, lp.out_channels) || !strictly_ascending_below(&lp.c_in, lp.in_channels) {
            return bad(format!("node {} channel indices must be ascending and in range", lp.node));
        }
        if lp.c_out.len() >= lp.out_channels {
            return Err(Error::Collapse { node: lp.node, channels: lp.out_channels });
        }
        let pred_out = model
            .conv_predecessor(lp.node)
            .and_then(|p| plan.layer(p))
            .map_or(&[][..], |p| &p.c_out[..]);
        if lp.c_in != pred_out {
            return bad(format!("node {} C_in differs from its predecessor's C_out", lp.node));
        }
        if (model.is_protected(lp.node)) && !(lp.c_in.is_empty() && lp.c_out.is_empty()) {
            return bad(format!("node {} is protected", lp.node));
        }
        if !lp.c_out.is_empty() || !lp.c_in.is_empty() {
            edits.insert(lp.node, Edit::Conv { drop_out: lp.c_out.clone(), drop_in: lp.c_in.clone() });
        }
    }
    let mut linears_seen = 0;
    for flow in model.channel_flows() {
        let lp = plan.layer(flow.conv).expect("checked above");
        if lp.c_out.is_empty() {
            continue;
        }
        for &r in &flow.region {
            if let Layer::BatchNorm2d(_) = model.node(r).layer {
                edits.insert(r, Edit::Bn { drop: lp.c_out.clone() });
            }
        }
        match flow.consumer {
            ChannelConsumer::Conv(_) => {}
            ChannelConsumer::Linear { node, spatial } => {
                let Some(l) = plan.linears.iter().find(|l| l.node == node && l.conv == flow.conv) else {
                    return bad(format!("no linear filter for conv {}", flow.conv));
                };
                let Layer::Linear(lin) = &model.node(node).layer else {
                    return bad(format!("node {node} is not linear"));
                };
                if l.spatial != spatial || l.channels != lp.c_out || lin.in_features() != spatial * lp.out_channels {
                    return bad(format!("linear filter for node {node}"));
                }
                linears_seen += 1;
                edits.insert(node, Edit::Linear { drop: lp.c_out.clone(), spatial });
            }
            ChannelConsumer::Pinned => return bad(format!("conv {} outputs are pinned", flow.conv)),
        }
    }
    if linears_seen != plan.linears.len() {
        return bad("unexpected linear filters".into());
    }
    Ok(edits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GraphBuilder, Pool2d};
    use crate::prune::analyse::analyse_sparsity;
    use crate::prune::plan::{plan_prune, LayerPlan};

    #[test]
    fn conv_is_rebuilt_with_algorithm_arithmetic() {
        let conv = Conv2d::new(Tensor::from_fn(&[8, 4, 3, 3], |i| i as f32), Some(Tensor::from_fn(&[8], |i| i as f32)), 1, 1).unwrap();
        let c = select_conv(&conv, &[1, 4, 6], &[2]);
        assert_eq!(c.weight.shape(), &[5, 3, 3, 3]);
        assert_eq!(c.bias.as_ref().unwrap().data(), &[0.0, 2.0, 3.0, 5.0, 7.0]);
        // Output 2, input 3 of the original sits at output 1, input 2 of the rebuilt conv.
        assert_eq!(c.weight.data()[(3 + 2) * 9], ((2 * 4 + 3) * 9) as f32);
    }

    fn small() -> ModelGraph {
        let mut b = GraphBuilder::new("s", vec![1, 4, 4], 2);
        let w0 = Tensor::from_fn(&[3, 1, 3, 3], |i| if i / 9 == 1 { 0.0 } else { 1.0 });
        b.push(Layer::Conv2d(Conv2d::new(w0, None, 1, 1).unwrap()));
        b.push(Layer::BatchNorm2d(BatchNorm2d::identity(3, 1e-5)));
        b.push(Layer::ReLU);
        b.push(Layer::Conv2d(Conv2d::new(Tensor::ones(&[2, 3, 3, 3]), None, 1, 1).unwrap()));
        b.push(Layer::ReLU);
        b.push(Layer::MaxPool2d(Pool2d::new(2, 2)));
        b.push(Layer::Flatten);
        b.push(Layer::Linear(Linear::new(Tensor::ones(&[2, 8]), None).unwrap()));
        b.build().unwrap()
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut m = small();
        if let Layer::Conv2d(c) = &mut m.nodes_mut()[0].layer {
            c.weight = Tensor::ones(&[3, 1, 3, 3]);
        }
        let plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        assert!(plan.is_empty());
        assert_eq!(execute_prune(&m, &plan).unwrap(), m);
    }

    #[test]
    fn batchnorm_region_is_filtered() {
        let m = small();
        let plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        let p = execute_prune(&m, &plan).unwrap();
        assert_eq!(p.node(0).layer.as_conv().unwrap().weight.shape(), &[2, 1, 3, 3]);
        let Layer::BatchNorm2d(bn) = &p.node(1).layer else { panic!() };
        assert_eq!(bn.channels(), 2);
        assert_eq!(p.node(3).layer.as_conv().unwrap().weight.shape(), &[2, 2, 3, 3]);
        assert_eq!(execute_prune_sequential(&m, &plan).unwrap(), p);
    }

    #[test]
    fn inconsistent_plan_is_rejected() {
        let m = small();
        let mut plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        plan.layers[1] = LayerPlan { c_in: vec![], ..plan.layers[1].clone() };
        assert!(matches!(execute_prune(&m, &plan), Err(Error::Structure(_))));
        let mut plan = plan_prune(&analyse_sparsity(&m), &m).unwrap();
        plan.layers[0].c_out = vec![1, 1];
        assert!(execute_prune(&m, &plan).is_err());
    }
}
