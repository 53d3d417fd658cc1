use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProfileRecord;
use crate::error::{Error, Result};

/// One point on the ratio-vs-accuracy and ratio-vs-speedup/spatial-compression axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub variant_id: String,
    pub compression_ratio: f64,
    pub top1_accuracy: f64,
    pub latency_mean_ms: f64,
    /// Baseline latency over this latency.
    pub speedup: f64,
    /// Baseline serialized size over this size.
    pub spatial_compression: f64,
    pub serialized_size_bytes: usize,
    pub param_count: usize,
}

/// Rows in ascending ratio order, relative to the lowest-ratio record.
pub fn plot_data(records: &[ProfileRecord]) -> Vec<PlotRow> {
    let Some(base) = records.iter().min_by(|a, b| a.compression_ratio.total_cmp(&b.compression_ratio)) else {
        return vec![];
    };
    let mut rows: Vec<PlotRow> = records
        .iter()
        .map(|r| PlotRow {
            variant_id: r.variant_id.clone(),
            compression_ratio: r.compression_ratio,
            top1_accuracy: r.top1_accuracy,
            latency_mean_ms: r.latency_ms.mean,
            speedup: base.latency_ms.mean / r.latency_ms.mean,
            spatial_compression: base.serialized_size_bytes as f64 / r.serialized_size_bytes as f64,
            serialized_size_bytes: r.serialized_size_bytes,
            param_count: r.param_count,
        })
        .collect();
    rows.sort_by(|a, b| a.compression_ratio.total_cmp(&b.compression_ratio));
    rows
}

pub fn write_plot_csv(rows: &[PlotRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FlatRecord<'a> {
    variant_id: &'a str,
    compression_ratio: f64,
    top1_accuracy: f64,
    latency_mean_ms: f64,
    latency_p50_ms: f64,
    latency_p95_ms: f64,
    param_count: usize,
    nonzero_count: usize,
    serialized_size_bytes: usize,
    peak_memory_bytes: usize,
    macs: u64,
}

pub fn write_records_csv(records: &[ProfileRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(FlatRecord {
            variant_id: &r.variant_id,
            compression_ratio: r.compression_ratio,
            top1_accuracy: r.top1_accuracy,
            latency_mean_ms: r.latency_ms.mean,
            latency_p50_ms: r.latency_ms.p50,
            latency_p95_ms: r.latency_ms.p95,
            param_count: r.param_count,
            nonzero_count: r.nonzero_count,
            serialized_size_bytes: r.serialized_size_bytes,
            peak_memory_bytes: r.peak_memory_bytes,
            macs: r.macs,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_json(records: &[ProfileRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(records)?)?;
    Ok(())
}

pub fn read_records_json(path: impl AsRef<Path>) -> Result<Vec<ProfileRecord>> {
    let records: Vec<ProfileRecord> = serde_json::from_slice(&std::fs::read(path)?)?;
    for r in &records {
        if !(0.0..=1.0).contains(&r.top1_accuracy) || r.latency_ms.p95 < r.latency_ms.p50 || r.latency_ms.mean <= 0.0 {
            return Err(Error::Config(format!("profile record {} violates its invariants", r.variant_id)));
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::LatencyStats;

    #[test]
    fn rows_are_relative_to_lowest_ratio() {
        let mk = |ratio: f64, lat: f64, size: usize| ProfileRecord {
            variant_id: format!("r{ratio}"),
            compression_ratio: ratio,
            top1_accuracy: 0.9,
            latency_ms: LatencyStats { mean: lat, p50: lat, p95: lat },
            param_count: size / 4,
            nonzero_count: size / 4,
            serialized_size_bytes: size,
            peak_memory_bytes: size,
            macs: 1,
        };
        let rows = plot_data(&[mk(4.0, 1.0, 500), mk(1.0, 2.0, 1000)]);
        assert_eq!(rows[0].compression_ratio, 1.0);
        assert_eq!(rows[1].speedup, 2.0);
        assert_eq!(rows[1].spatial_compression, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.csv");
        write_plot_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("variant_id,compression_ratio,top1_accuracy,latency_mean_ms,speedup"));
        assert_eq!(text.lines().count(), 3);
    }
}
