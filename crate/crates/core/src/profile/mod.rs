//! Per-variant benchmarking and Pareto post-processing of a portfolio.

mod pareto;
mod plot;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use pareto::{distinct_sizes, dominates, pareto_filter, ParetoResult, DEFAULT_DELTA};
pub use plot::{plot_data, read_records_json, write_plot_csv, write_records_csv, write_records_json, PlotRow};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::format::serialize;
use crate::forward::{forward_with, ConvAlgo};
use crate::model::{Layer, ModelGraph};
use crate::train::accuracy;

/// Model metadata key holding the sparse variant's compression ratio. Pruning keeps it, so pruned
/// variants report the ratio they were trained at rather than their post-pruning density.
pub const RATIO_METRIC: &str = "compression_ratio";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Mean and nearest-rank percentiles of `samples` (milliseconds).
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencyStats {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.50),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub variant_id: String,
    pub compression_ratio: f64,
    pub top1_accuracy: f64,
    pub latency_ms: LatencyStats,
    pub param_count: usize,
    pub nonzero_count: usize,
    pub serialized_size_bytes: usize,
    pub peak_memory_bytes: usize,
    pub macs: u64,
}

/// Where latency figures come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencySource {
    /// Wall-clock timing of single-batch forwards.
    #[default]
    Measured,
    /// `macs / 1e6` milliseconds: a reproducible stand-in when outputs must not depend on timing.
    Macs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileOptions {
    pub reps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub latency: LatencySource,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { reps: 20, warmup: 3, batch_size: 1, latency: LatencySource::Measured }
    }
}

/// Accuracy, latency, size and memory footprint of one model on `test`.
pub fn profile(model: &ModelGraph, test: &Dataset, opts: &ProfileOptions) -> Result<ProfileRecord> {
    if test.is_empty() {
        return Err(Error::Dataset("test set is empty".into()));
    }
    if opts.reps < 3 {
        return Err(Error::Config(format!("profiling needs at least 3 repetitions, got {}", opts.reps)));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let top1_accuracy = accuracy(model, test)? as f64;
    let macs = macs(model)?;
    let latency_ms = match opts.latency {
        LatencySource::Measured => measure_latency(model, test, opts)?,
        LatencySource::Macs => {
            let ms = macs.max(1) as f64 / 1e6;
            LatencyStats { mean: ms, p50: ms, p95: ms }
        }
    };
    let nonzero_count = model.nonzero_count();
    let compression_ratio = match model.meta.metrics.get(RATIO_METRIC) {
        Some(&r) => r,
        None => model.param_count() as f64 / nonzero_count.max(1) as f64,
    };
    Ok(ProfileRecord {
        variant_id: model.meta.name.clone(),
        compression_ratio,
        top1_accuracy,
        latency_ms,
        param_count: model.param_count(),
        nonzero_count,
        serialized_size_bytes: serialize(model).len(),
        peak_memory_bytes: peak_memory_bytes(model)?,
        macs,
    })
}

fn measure_latency(model: &ModelGraph, test: &Dataset, opts: &ProfileOptions) -> Result<LatencyStats> {
    let idx: Vec<usize> = (0..opts.batch_size).map(|i| i % test.len()).collect();
    let (batch, _) = test.gather(&idx);
    for _ in 0..opts.warmup {
        std::hint::black_box(forward_with(model, &batch, ConvAlgo::Im2col)?);
    }
    let mut samples = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let t = Instant::now();
        std::hint::black_box(forward_with(model, &batch, ConvAlgo::Im2col)?);
        samples.push((t.elapsed().as_secs_f64() * 1e3).max(1e-9));
    }
    Ok(LatencyStats::from_samples(&samples))
}

/// Parameter bytes plus the largest input+output activation footprint of any node, at batch 1.
pub fn peak_memory_bytes(model: &ModelGraph) -> Result<usize> {
    let shapes = model.infer_shapes()?;
    let input: usize = model.meta.input_shape.iter().product();
    let size = |s: Option<usize>| s.map_or(input, |i| shapes[i].iter().product());
    let activations = (0..model.len())
        .map(|i| {
            let mut inputs = size(model.source_of(i));
            if let Layer::Add { other } = model.node(i).layer {
                inputs += size(Some(other));
            }
            inputs + shapes[i].iter().product::<usize>()
        })
        .max()
        .unwrap_or(0);
    Ok((model.param_count() + activations) * 4)
}

/// Multiply-accumulates of one dense forward pass at batch 1 (zeros are counted).
pub fn macs(model: &ModelGraph) -> Result<u64> {
    let shapes = model.infer_shapes()?;
    Ok(model
        .nodes()
        .iter()
        .zip(&shapes)
        .map(|(n, out)| match &n.layer {
            Layer::Conv2d(c) => {
                let (kh, kw) = c.kernel();
                (out.iter().product::<usize>() * c.in_channels() * kh * kw) as u64
            }
            Layer::Linear(l) => (l.in_features() * l.out_features()) as u64,
            _ => 0,
        })
        .sum())
}
