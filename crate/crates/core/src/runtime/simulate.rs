use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{init_runtime, Decision, PortfolioPackage, SwitchPolicy};
use crate::error::{Error, Result};
use crate::format::deserialize;
use crate::model::ModelGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub timestamp_ms: u64,
    pub qps: f64,
    pub active_index: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub samples: usize,
    pub switches: usize,
    pub initial_index: usize,
    /// Inflation wall-clock for each switch, in order.
    pub switch_overhead_ms: Vec<f64>,
    pub mean_overhead_ms: f64,
    pub compressed_total_bytes: usize,
    pub uncompressed_total_bytes: usize,
    /// All blobs plus the largest model that was ever the single inflated one.
    pub peak_memory_bytes: usize,
    /// As above, but counting both models while a handover is in flight.
    pub handover_peak_bytes: usize,
    pub timeline: Vec<TimelinePoint>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Replays a `(timestamp_ms, qps)` trace through a fresh runtime.
pub fn simulate(package: &PortfolioPackage, trace: &[(u64, f64)], policy: SwitchPolicy) -> Result<SimulationReport> {
    if trace.is_empty() {
        return Err(Error::Trace { line: 0, msg: "trace is empty".into() });
    }
    let runtime = init_runtime(package.clone(), policy)?;
    let raw = |i: usize| package.manifest().entries[i].raw_bytes;
    let compressed = package.compressed_total();
    let initial_index = runtime.active_index();
    let mut steady = raw(initial_index);
    let mut handover = steady;
    let mut overheads = Vec::new();
    let mut timeline = Vec::with_capacity(trace.len());
    for &(ts, qps) in trace {
        let obs = runtime.observe(ts, qps)?;
        if let Some(ms) = obs.overhead_ms {
            overheads.push(ms);
            steady = steady.max(raw(obs.active_index));
            handover = handover.max(raw(obs.previous_index) + raw(obs.active_index));
        }
        timeline.push(TimelinePoint { timestamp_ms: ts, qps, active_index: obs.active_index, decision: obs.decision });
    }
    Ok(SimulationReport {
        samples: trace.len(),
        switches: overheads.len(),
        initial_index,
        mean_overhead_ms: if overheads.is_empty() { 0.0 } else { overheads.iter().sum::<f64>() / overheads.len() as f64 },
        switch_overhead_ms: overheads,
        compressed_total_bytes: compressed,
        uncompressed_total_bytes: package.raw_total(),
        peak_memory_bytes: compressed + steady,
        handover_peak_bytes: compressed + handover.max(steady),
        timeline,
    })
}

/// Parses `timestamp_ms,qps` CSV (header optional). Line numbers in errors are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut rows = Vec::new();
    let mut last = 0u64;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.replace(' ', "") == "timestamp_ms,qps") {
            continue;
        }
        let bad = |msg: String| Error::Trace { line: line_no, msg };
        let mut fields = line.split(',').map(str::trim);
        let (Some(ts), Some(qps), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad(format!("expected 2 fields, got {line:?}")));
        };
        let ts: u64 = ts.parse().map_err(|e| bad(format!("timestamp {ts:?}: {e}")))?;
        let qps: f64 = qps.parse().map_err(|e| bad(format!("qps {qps:?}: {e}")))?;
        if !qps.is_finite() || qps < 0.0 {
            return Err(bad(format!("qps {qps} must be finite and non-negative")));
        }
        if ts < last {
            return Err(bad(format!("timestamp {ts} goes backwards (previous {last})")));
        }
        last = ts;
        rows.push((ts, qps));
    }
    if rows.is_empty() {
        return Err(Error::Trace { line: 0, msg: "trace has no samples".into() });
    }
    Ok(rows)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn write_timeline_csv(report: &SimulationReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &report.timeline {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and deserializes a `.dms` file after asking the kernel to drop its cached pages,
/// returning the model and the read+parse wall-clock in milliseconds.
pub fn cold_load(path: impl AsRef<Path>) -> Result<(ModelGraph, f64)> {
    let mut file = std::fs::File::open(path)?;
    file.sync_all()?;
    drop_page_cache(&file);
    let t = Instant::now();
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let model = deserialize(&bytes)?;
    Ok((model, t.elapsed().as_secs_f64() * 1e3))
}

#[cfg(target_os = "linux")]
fn drop_page_cache(file: &std::fs::File) {
    use std::os::fd::AsRawFd;
    // Advisory only; a failure just leaves the read warm.
    // SAFETY: the descriptor is owned by `file` and open for the duration of the call.
    let rc = unsafe { libc::posix_fadvise(file.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) };
    if rc != 0 {
        log::debug!("posix_fadvise failed with {rc}");
    }
}

#[cfg(not(target_os = "linux"))]
fn drop_page_cache(_: &std::fs::File) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_header() {
        assert_eq!(parse_trace("timestamp_ms,qps\n0,10\n5,12.5\n").unwrap(), vec![(0, 10.0), (5, 12.5)]);
        assert_eq!(parse_trace("0,1\n").unwrap(), vec![(0, 1.0)]);
    }

    #[test]
    fn reports_bad_line_numbers() {
        let err = parse_trace("timestamp_ms,qps\n0,10\nx,3\n").unwrap_err();
        assert!(matches!(err, Error::Trace { line: 3, .. }), "{err}");
        let err = parse_trace("0,10\n5,1,2\n").unwrap_err();
        assert!(matches!(err, Error::Trace { line: 2, .. }));
        let err = parse_trace("10,1\n5,1\n").unwrap_err();
        assert!(matches!(err, Error::Trace { line: 2, .. }));
        assert!(parse_trace("timestamp_ms,qps\n").is_err());
    }
}
