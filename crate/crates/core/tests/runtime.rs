mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use common::{random_batch, random_cnn};
use modelshift::format::{serialize, write_model};
use modelshift::model::{architecture, Architecture, ModelGraph};
use modelshift::profile::{LatencyStats, ProfileRecord};
use modelshift::runtime::*;
use modelshift::{forward, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(m: &ModelGraph, id: &str) -> ProfileRecord {
    ProfileRecord {
        variant_id: id.into(),
        compression_ratio: m.param_count() as f64 / m.nonzero_count() as f64,
        top1_accuracy: 0.5,
        latency_ms: LatencyStats { mean: 1.0, p50: 1.0, p95: 1.0 },
        param_count: m.param_count(),
        nonzero_count: m.nonzero_count(),
        serialized_size_bytes: serialize(m).len(),
        peak_memory_bytes: 0,
        macs: 0,
    }
}

/// Toy CNNs at several widths, so every entry has a distinct size.
fn portfolio(m: usize) -> (Vec<ModelGraph>, Vec<ProfileRecord>) {
    let models: Vec<ModelGraph> = (0..m)
        .map(|i| {
            let cfg = modelshift::model::VggConfig::vgg_wide(0.05 + 0.03 * i as f32);
            modelshift::model::vgg(&cfg, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap()
        })
        .collect();
    let records = models.iter().enumerate().map(|(i, m)| record(m, &format!("v{i}"))).collect();
    (models, records)
}

/// Zeroes all but roughly `keep` of the weights, at random positions.
fn sparse_copy(m: &ModelGraph, keep: f64, rng: &mut ChaCha8Rng) -> ModelGraph {
    let mut nodes = m.nodes().to_vec();
    for n in &mut nodes {
        if let Some(w) = n.layer.prunable_weight_mut() {
            for x in w.data_mut() {
                if !rng.random_bool(keep) {
                    *x = 0.0;
                }
            }
        }
    }
    ModelGraph::new(m.meta.clone(), nodes).unwrap()
}

#[test]
fn dense_weights_barely_deflate() {
    let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap();
    let raw = serialize(&m);
    let packed = deflate(&raw, DEFAULT_DEFLATE_LEVEL).unwrap();
    assert!(packed.len() as f64 > 0.5 * raw.len() as f64);
}

#[test]
fn eighth_density_deflates_below_half() {
    let m = architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap();
    let sparse = sparse_copy(&m, 0.125, &mut ChaCha8Rng::seed_from_u64(3));
    let raw = serialize(&sparse);
    assert!((deflate(&raw, DEFAULT_DEFLATE_LEVEL).unwrap().len() as f64) < 0.5 * raw.len() as f64);
}

#[test]
fn package_round_trips_bit_exactly() {
    let (models, records) = portfolio(4);
    let pkg = deflate_portfolio(&models, &records, DEFAULT_DEFLATE_LEVEL).unwrap();
    let sizes: Vec<usize> = pkg.manifest().entries.iter().map(|e| e.raw_bytes).collect();
    assert!(sizes.windows(2).all(|w| w[0] < w[1]));
    let reread = PortfolioPackage::from_bytes(&pkg.to_bytes()).unwrap();
    assert_eq!(reread, pkg);
    let x = random_batch(&models[0], 2, &mut ChaCha8Rng::seed_from_u64(1));
    for (i, e) in pkg.manifest().entries.iter().enumerate() {
        let src = models.iter().position(|m| serialize(m).len() == e.raw_bytes).unwrap();
        assert_eq!(pkg.inflate(i).unwrap(), serialize(&models[src]));
        let a = forward(&models[src], &x).unwrap();
        let b = forward(&pkg.inflate_model(i).unwrap(), &x).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn equal_sizes_and_bad_inputs_are_rejected() {
    let (models, records) = portfolio(2);
    let twice = vec![models[0].clone(), models[0].clone()];
    assert!(deflate_portfolio(&twice, &records, 6).is_err());
    assert!(deflate_portfolio(&models, &records[..1], 6).is_err());
    assert!(deflate_portfolio(&models, &records, 10).is_err());
}

#[test]
fn median_model_is_active_after_init() {
    let (models, records) = portfolio(5);
    let pkg = deflate_portfolio(&models, &records, 6).unwrap();
    let rt = init_runtime(pkg.clone(), SwitchPolicy::default()).unwrap();
    assert_eq!(rt.active_index(), 2);
    assert_eq!(serialize(&rt.active_model()), pkg.inflate(2).unwrap());
    // Sizes ascend with the width multiplier, so the median is the third model.
    assert_eq!(serialize(&rt.active_model()), serialize(&models[2]));
}

#[test]
fn corrupt_blob_is_detected() {
    let (models, records) = portfolio(3);
    let pkg = deflate_portfolio(&models, &records, 6).unwrap();
    let mut bytes = pkg.to_bytes();
    let n = bytes.len();
    bytes[n - 10] ^= 0x55;
    let err = PortfolioPackage::from_bytes(&bytes).and_then(|p| init_runtime(p, SwitchPolicy::default()).map(|_| ()));
    assert!(matches!(err, Err(Error::CorruptPackage { entry: 2, .. })), "{err:?}");
    assert!(matches!(PortfolioPackage::from_bytes(b"DNPX\x01\x00"), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(PortfolioPackage::from_bytes(&bytes[..n - 1]), Err(Error::Format { .. })));
}

/// Independent restatement of the switching rule, used as the oracle for simulated traces.
fn reference_policy(trace: &[(u64, f64)], m: usize, p: &SwitchPolicy) -> Vec<usize> {
    let af = 1.0 - (-std::f64::consts::LN_2 / p.fast_half_life).exp();
    let as_ = 1.0 - (-std::f64::consts::LN_2 / p.slow_half_life).exp();
    let mut idx = m / 2;
    let (mut f, mut s) = (trace[0].1, trace[0].1);
    let mut since = trace[0].0;
    let mut out = vec![idx];
    for &(t, q) in &trace[1..] {
        f = af * q + (1.0 - af) * f;
        s = as_ * q + (1.0 - as_) * s;
        if t - since < p.min_dwell_ms {
            out.push(idx);
            continue;
        }
        let r = f / s;
        let next = if r > p.up_threshold { (idx + 1).min(m - 1) } else if r < p.down_threshold { idx.saturating_sub(1) } else { idx };
        if next != idx {
            idx = next;
            f = q;
            s = q;
            since = t;
        }
        out.push(idx);
    }
    out
}

fn square_wave(half_period_ms: u64, periods: u64, step_ms: u64, lo: f64, hi: f64) -> (Vec<(u64, f64)>, usize) {
    let end = half_period_ms * 2 * periods;
    let trace: Vec<(u64, f64)> =
        (0..end / step_ms).map(|i| (i * step_ms, if (i * step_ms / half_period_ms).is_multiple_of(2) { hi } else { lo })).collect();
    (trace, (2 * periods - 1) as usize)
}

#[test]
fn square_wave_switches_once_per_edge() {
    let (models, records) = portfolio(4);
    let pkg = deflate_portfolio(&models, &records, 6).unwrap();
    let policy = SwitchPolicy::default();
    let (trace, edges) = square_wave(6000, 5, 100, 200.0, 400.0);
    let report = simulate(&pkg, &trace, policy).unwrap();
    assert!(report.switches.abs_diff(edges) <= 1, "{} switches for {edges} edges", report.switches);
    let want = reference_policy(&trace, pkg.len(), &policy);
    let got: Vec<usize> = report.timeline.iter().map(|p| p.active_index).collect();
    assert_eq!(got, want);
    let mut prev = (report.initial_index, None::<u64>);
    for p in &report.timeline {
        if p.active_index != prev.0 {
            assert_eq!(p.active_index.abs_diff(prev.0), 1);
            if let Some(t) = prev.1 {
                assert!(p.timestamp_ms - t >= policy.min_dwell_ms);
            }
            prev = (p.active_index, Some(p.timestamp_ms));
        }
    }
    let max_raw = pkg.manifest().entries.iter().map(|e| e.raw_bytes).max().unwrap();
    assert!(report.peak_memory_bytes <= report.compressed_total_bytes + max_raw);
    assert!(report.handover_peak_bytes >= report.peak_memory_bytes);
}

#[test]
fn random_traces_match_reference() {
    let (models, records) = portfolio(5);
    let pkg = deflate_portfolio(&models, &records, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let policy = SwitchPolicy { min_dwell_ms: rng.random_range(0..3000), ..Default::default() };
        let mut q = 300.0;
        let mut t = 0;
        let trace: Vec<(u64, f64)> = (0..300)
            .map(|_| {
                t += rng.random_range(0..200);
                q = (q * rng.random_range(0.85..1.17f64)).clamp(10.0, 5000.0);
                (t, q)
            })
            .collect();
        let report = simulate(&pkg, &trace, policy).unwrap();
        let got: Vec<usize> = report.timeline.iter().map(|p| p.active_index).collect();
        assert_eq!(got, reference_policy(&trace, pkg.len(), &policy));
    }
}

#[test]
fn flat_trace_costs_blobs_plus_one_model() {
    let (models, records) = portfolio(3);
    let pkg = deflate_portfolio(&models, &records, 6).unwrap();
    let trace: Vec<(u64, f64)> = (0..100).map(|i| (i * 50, 100.0)).collect();
    let r = simulate(&pkg, &trace, SwitchPolicy::default()).unwrap();
    assert_eq!(r.switches, 0);
    assert_eq!(r.peak_memory_bytes, pkg.compressed_total() + pkg.manifest().entries[1].raw_bytes);
}

#[test]
fn readers_never_see_a_partial_model() {
    let (models, records) = portfolio(3);
    let pkg = deflate_portfolio(&models, &records, 6).unwrap();
    let rt = Arc::new(init_runtime(pkg, SwitchPolicy { min_dwell_ms: 0, ..Default::default() }).unwrap());
    let x = random_batch(&models[0], 1, &mut ChaCha8Rng::seed_from_u64(2));
    let expected: Vec<_> = models.iter().map(|m| forward(m, &x).unwrap()).collect();
    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let (rt, x, expected, stop) = (rt.clone(), x.clone(), expected.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut n = 0;
                while !stop.load(Ordering::Relaxed) {
                    let y = rt.infer(&x).unwrap();
                    assert!(expected.iter().any(|e| e.bit_eq(&y)));
                    n += 1;
                }
                n
            })
        })
        .collect();
    let mut q = 100.0;
    for t in 0..400u64 {
        q *= if (t / 40) % 2 == 0 { 1.1 } else { 0.9 };
        rt.observe(t, q).unwrap();
    }
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        assert!(r.join().unwrap() > 0);
    }
    assert!(rt.stats().switches > 2);
}

#[test]
fn cold_load_reads_back_the_model() {
    let m = random_cnn(&mut ChaCha8Rng::seed_from_u64(4));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.dms");
    write_model(&p, &m).unwrap();
    let (back, ms) = cold_load(&p).unwrap();
    assert_eq!(back, m);
    assert!(ms >= 0.0);
}
