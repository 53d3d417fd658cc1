use serde::{Deserialize, Serialize};

use super::ProfileRecord;

/// Relative tolerance under which two records count as the same model.
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    /// Indices into the input, ascending by serialized size.
    pub optimal: Vec<usize>,
    pub search_efficiency: f64,
}

fn key(r: &ProfileRecord) -> [f64; 3] {
    // Minimised: size, latency, and negated accuracy.
    [r.serialized_size_bytes as f64, r.latency_ms.mean, -r.top1_accuracy]
}

/// `a` is no worse than `b` on size, latency and accuracy, and strictly better on one.
pub fn dominates(a: &ProfileRecord, b: &ProfileRecord) -> bool {
    let (ka, kb) = (key(a), key(b));
    ka.iter().zip(&kb).all(|(x, y)| x <= y) && ka.iter().zip(&kb).any(|(x, y)| x < y)
}

fn near(a: &ProfileRecord, b: &ProfileRecord, delta: f64) -> bool {
    key(a).iter().zip(&key(b)).all(|(x, y)| {
        let scale = x.abs().max(y.abs());
        (x - y).abs() <= delta * scale
    })
}

/// Non-dominated records, with near-duplicates (every metric within `delta` relative) folded
/// into the smallest of them. Equal sizes go to the one with fewer nonzeros, which deflates smaller.
pub fn pareto_filter(records: &[ProfileRecord], delta: f64) -> ParetoResult {
    if records.is_empty() {
        return ParetoResult { optimal: vec![], search_efficiency: 0.0 };
    }
    let mut front: Vec<usize> = (0..records.len())
        .filter(|&i| !records.iter().any(|o| dominates(o, &records[i])))
        .collect();
    front.sort_by_key(|&i| (records[i].serialized_size_bytes, records[i].nonzero_count, i));
    let mut optimal: Vec<usize> = Vec::new();
    for i in front {
        if !optimal.iter().any(|&k| near(&records[k], &records[i], delta)) {
            optimal.push(i);
        }
    }
    let search_efficiency = optimal.len() as f64 / records.len() as f64;
    ParetoResult { optimal, search_efficiency }
}

/// One record per serialized size out of `optimal`, for packaging: the most accurate, then the
/// one with fewer nonzeros. Keeps ascending size order.
pub fn distinct_sizes(records: &[ProfileRecord], optimal: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &i in optimal {
        let r = &records[i];
        match out.iter().position(|&k| records[k].serialized_size_bytes == r.serialized_size_bytes) {
            Some(pos) => {
                let k = &records[out[pos]];
                if (r.top1_accuracy, std::cmp::Reverse(r.nonzero_count)) > (k.top1_accuracy, std::cmp::Reverse(k.nonzero_count)) {
                    out[pos] = i;
                }
            }
            None => out.push(i),
        }
    }
    out.sort_by_key(|&i| records[i].serialized_size_bytes);
    out
}
