//! Zero-channel structured pruning: fuse batchnorms, find all-zero output channels, plan the
//! matching input/output removals along the conv chain, and rebuild the affected layers.

mod analyse;
mod execute;
mod fuse;
mod plan;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use analyse::{analyse_sparsity, LayerSparsity, SparsityReport};
pub use execute::{execute_prune, execute_prune_sequential};
pub use fuse::fuse_conv_bn;
pub use plan::{plan_prune, plan_prune_with, ChannelVerdict, LayerPlan, LinearPlan, PruneMode, PrunePlan};

use crate::error::Result;
use crate::model::{Layer, ModelGraph};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneOptions {
    pub mode: PruneMode,
    /// Rebuild one producer at a time instead of all layers in one batch.
    pub sequential: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub fuse_ms: f64,
    pub analyse_ms: f64,
    pub plan_ms: f64,
    pub execute_ms: f64,
    pub total_ms: f64,
}

/// Removals at one node, summed over all rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub node: usize,
    pub kind: String,
    pub removed_out: usize,
    pub removed_in: usize,
    pub removed_params: usize,
    pub shape_before: Vec<usize>,
    pub shape_after: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundVerdict {
    pub round: usize,
    #[serde(flatten)]
    pub verdict: ChannelVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneAudit {
    pub mode: PruneMode,
    pub batchnorms_fused: usize,
    /// Parameters dropped by fusion (batchnorm gamma/beta minus any bias the conv gained).
    pub fusion_removed_params: i64,
    pub rounds: usize,
    pub channels_removed: usize,
    pub unsafe_removed: usize,
    /// Zero channels still present at the end (strict mode only).
    pub unsafe_kept: usize,
    /// Largest perturbation bound over unsafe channels that were removed.
    pub max_unsafe_bound: f64,
    pub params_before: usize,
    pub params_after: usize,
    /// Fusion delta plus every per-layer removal; equals `params_before - params_after`.
    pub removed_params_total: i64,
    pub layers: Vec<LayerAudit>,
    pub channels: Vec<RoundVerdict>,
    pub timings: StageTimings,
}

impl PruneAudit {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit serialises")
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Full pipeline with default options.
pub fn prune(model: &ModelGraph) -> Result<(ModelGraph, PruneAudit)> {
    prune_with(model, PruneOptions::default())
}

/// Fuses, then repeats analyse, plan and execute until a round finds nothing to remove.
///
/// Dropping input channels can leave a downstream output channel with no nonzero weight, so one
/// round is not always enough for the result to be free of zero channels.
pub fn prune_with(model: &ModelGraph, opts: PruneOptions) -> Result<(ModelGraph, PruneAudit)> {
    let start = Instant::now();
    let mut timings = StageTimings::default();

    // Report collapse against the caller's node numbering; fusion shifts indices.
    if let Some(l) = analyse_sparsity(model).layers.iter().find(|l| l.collapsed()) {
        return Err(crate::Error::Collapse { node: l.node, channels: l.out_channels });
    }
    let t = Instant::now();
    let mut current = fuse_conv_bn(model)?;
    timings.fuse_ms = ms(t);
    let batchnorms_fused = model.len() - current.len();
    let fusion_removed_params = model.param_count() as i64 - current.param_count() as i64;
    let fused_shapes: Vec<Vec<usize>> = current.nodes().iter().map(|n| layer_shape(&n.layer)).collect();

    let mut removed: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let mut channels = Vec::new();
    let mut rounds = 0;
    loop {
        let t = Instant::now();
        let report = analyse_sparsity(&current);
        timings.analyse_ms += ms(t);

        let t = Instant::now();
        let plan = plan_prune_with(&report, &current, opts.mode)?;
        timings.plan_ms += ms(t);
        channels.extend(plan.verdicts.iter().cloned().map(|verdict| RoundVerdict { round: rounds, verdict }));
        if plan.is_empty() {
            break;
        }
        rounds += 1;
        tally(&current, &plan, &mut removed);

        let t = Instant::now();
        current = if opts.sequential {
            execute_prune_sequential(&current, &plan)?
        } else {
            execute_prune(&current, &plan)?
        };
        timings.execute_ms += ms(t);
    }
    timings.total_ms = ms(start);

    let layers: Vec<LayerAudit> = removed
        .into_iter()
        .map(|(node, (removed_out, removed_in, removed_params))| LayerAudit {
            node,
            kind: current.node(node).layer.kind_name().to_string(),
            removed_out,
            removed_in,
            removed_params,
            shape_before: fused_shapes[node].clone(),
            shape_after: layer_shape(&current.node(node).layer),
        })
        .collect();
    let removed_params_total = fusion_removed_params + layers.iter().map(|l| l.removed_params as i64).sum::<i64>();
    let removed_verdicts = channels.iter().filter(|c| c.verdict.removed);
    let audit = PruneAudit {
        mode: opts.mode,
        batchnorms_fused,
        fusion_removed_params,
        rounds,
        channels_removed: removed_verdicts.clone().count(),
        unsafe_removed: removed_verdicts.clone().filter(|c| !c.verdict.safe).count(),
        unsafe_kept: channels.iter().filter(|c| c.round == rounds && !c.verdict.removed).count(),
        max_unsafe_bound: removed_verdicts
            .filter(|c| !c.verdict.safe)
            .map(|c| c.verdict.bound)
            .fold(0.0, f64::max),
        params_before: model.param_count(),
        params_after: current.param_count(),
        removed_params_total,
        layers,
        channels,
        timings,
    };
    if audit.channels_removed == 0 {
        log::warn!("0 channels removed");
    }
    Ok((current, audit))
}

/// Per-node (outputs, inputs, parameters) removed by one plan, from the plan arithmetic alone.
fn tally(model: &ModelGraph, plan: &PrunePlan, acc: &mut BTreeMap<usize, (usize, usize, usize)>) {
    let flows = model.channel_flows();
    for lp in &plan.layers {
        if lp.c_out.is_empty() && lp.c_in.is_empty() {
            continue;
        }
        let conv = model.node(lp.node).layer.as_conv().expect("conv");
        let (kh, kw) = conv.kernel();
        let weights = (lp.out_channels * lp.in_channels - lp.out_after() * lp.in_after()) * kh * kw;
        let bias = if conv.bias.is_some() { lp.c_out.len() } else { 0 };
        let e = acc.entry(lp.node).or_default();
        e.0 += lp.c_out.len();
        e.1 += lp.c_in.len();
        e.2 += weights + bias;
        for flow in flows.iter().filter(|f| f.conv == lp.node && !lp.c_out.is_empty()) {
            for &r in &flow.region {
                if matches!(model.node(r).layer, Layer::BatchNorm2d(_)) {
                    let e = acc.entry(r).or_default();
                    e.0 += lp.c_out.len();
                    e.2 += 2 * lp.c_out.len();
                }
            }
        }
    }
    for l in &plan.linears {
        let Layer::Linear(lin) = &model.node(l.node).layer else { continue };
        let e = acc.entry(l.node).or_default();
        e.1 += l.channels.len() * l.spatial;
        e.2 += l.channels.len() * l.spatial * lin.out_features();
    }
}

fn layer_shape(layer: &Layer) -> Vec<usize> {
    match layer {
        Layer::Conv2d(c) => c.weight.shape().to_vec(),
        Layer::Linear(l) => l.weight.shape().to_vec(),
        Layer::BatchNorm2d(b) => vec![b.channels()],
        _ => vec![],
    }
}
