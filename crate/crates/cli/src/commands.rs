use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use modelshift::format::mask::write_mask;
use modelshift::format::{read_model, write_model};
use modelshift::model::{architecture, ModelGraph};
use modelshift::profile::{
    distinct_sizes, pareto_filter, plot_data, profile, read_records_json, write_plot_csv, write_records_csv,
    write_records_json, ProfileRecord, RATIO_METRIC,
};
use modelshift::prune::{prune_with, PruneAudit};
use modelshift::runtime::{deflate_portfolio, read_trace, simulate, write_timeline_csv, PortfolioPackage};
use modelshift::train::{imp_portfolio_with, write_train_log};
use modelshift::Error;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::exit::{usage, CliError, CliResult};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = PipelineConfig::resolve(cli)?;
    match &cli.command {
        Command::Train { arch, data, epochs } => {
            if let Some(a) = arch {
                cfg.architecture = a.clone();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.validate()?;
            cmd_train(&cfg, data.as_deref())
        }
        Command::Prune { input } => cmd_prune(&cfg, input),
        Command::Profile { models, data, reps } => {
            if let Some(r) = reps {
                cfg.profile.reps = *r;
            }
            cfg.validate()?;
            cmd_profile(&cfg, models, data.as_deref())
        }
        Command::Package { models, records, data } => cmd_package(&cfg, models, records.as_deref(), data.as_deref()),
        Command::Simulate { package, trace } => cmd_simulate(&cfg, package, trace),
        Command::PlotData { records } => cmd_plotdata(&cfg, records),
    }
}

fn out_dir(cfg: &PipelineConfig, stage: &str) -> CliResult<PathBuf> {
    let dir = cfg.out.join(stage);
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", path.display())))
    }
}

/// `.dms` files named by `input`: the file itself, or a directory's models in name order.
fn model_paths(input: &Path) -> CliResult<Vec<PathBuf>> {
    require(input)?;
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dms"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .dms models in {}", input.display())));
    }
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn load_models(input: &Path) -> CliResult<Vec<(PathBuf, ModelGraph)>> {
    model_paths(input)?
        .into_iter()
        .map(|p| {
            let m = read_model(&p).map_err(|e| with_path(e, &p))?;
            Ok((p, m))
        })
        .collect()
}

fn with_path(e: Error, path: &Path) -> CliError {
    match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) }.into(),
        other => other.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_vec_pretty(value).map_err(Error::from)?)?;
    Ok(())
}

#[derive(Serialize)]
struct VariantSummary {
    level: usize,
    name: String,
    nominal_ratio: f64,
    compression_ratio: f64,
    prunable_kept: usize,
    test_accuracy: f32,
}

fn cmd_train(cfg: &PipelineConfig, data_flag: Option<&Path>) -> CliResult<()> {
    if let Some(d) = data_flag {
        require(d)?;
    }
    let data = cfg.dataset(data_flag)?;
    let shape = data.train.sample_shape();
    let [c, h, w] = shape[..] else {
        return Err(usage(format!("expected [channels, height, width] samples, got {shape:?}")));
    };
    let arch = cfg.architecture()?;
    let model = architecture(arch, [c, h, w], data.train.num_classes(), cfg.seed)?;
    log::info!("training {} ({} params) for {} pruning iterations", cfg.architecture, model.param_count(), cfg.train.portfolio_depth);
    let t = Instant::now();
    let variants = imp_portfolio_with(&model, &data, &cfg.train, |v| {
        log::info!("level {}: {} weights kept, test accuracy {:.3}", v.level, v.mask.kept(), v.test_accuracy);
    })?;

    let dir = out_dir(cfg, "sparse")?;
    let mut summary = Vec::with_capacity(variants.len());
    for v in variants {
        let name = format!("{}-l{:02}", cfg.architecture, v.level);
        let mut m = v.model.clone();
        m.meta.name = name.clone();
        m.meta.metrics.insert(RATIO_METRIC.into(), v.measured_ratio());
        m.meta.metrics.insert("level".into(), v.level as f64);
        m.meta.metrics.insert("test_accuracy".into(), v.test_accuracy as f64);
        write_model(dir.join(format!("{name}.dms")), &m)?;
        write_mask(dir.join(format!("{name}.mask")), &v.mask)?;
        write_train_log(&v.log, dir.join(format!("{name}.log.csv")))?;
        summary.push(VariantSummary {
            level: v.level,
            name,
            nominal_ratio: v.nominal_ratio(),
            compression_ratio: v.measured_ratio(),
            prunable_kept: v.mask.kept(),
            test_accuracy: v.test_accuracy,
        });
    }
    write_json(&dir.join("portfolio.json"), &summary)?;
    println!("trained {} variants in {:.1}s -> {}", summary.len(), t.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PruneSummary {
    pruned: Vec<PrunedEntry>,
    /// Variants left out because pruning would have emptied a layer.
    collapsed: Vec<CollapsedEntry>,
}

#[derive(Serialize)]
struct PrunedEntry {
    name: String,
    params_before: usize,
    params_after: usize,
    channels_removed: usize,
    total_ms: f64,
}

#[derive(Serialize)]
struct CollapsedEntry {
    name: String,
    message: String,
}

fn cmd_prune(cfg: &PipelineConfig, input: &Path) -> CliResult<()> {
    let models = load_models(input)?;
    let opts = cfg.prune_options();
    let mut done: Vec<(String, ModelGraph, PruneAudit)> = Vec::new();
    let mut collapsed = Vec::new();
    let mut last_collapse = None;
    for (path, model) in &models {
        let name = stem(path);
        match prune_with(model, opts) {
            Ok((pruned, audit)) => done.push((name, pruned, audit)),
            Err(e @ Error::Collapse { .. }) => {
                log::warn!("{name}: {e}; variant skipped");
                collapsed.push(CollapsedEntry { name, message: e.to_string() });
                last_collapse = Some(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if done.is_empty() {
        return Err(last_collapse.expect("no model pruned without a collapse").into());
    }

    let dir = out_dir(cfg, "pruned")?;
    let mut pruned = Vec::with_capacity(done.len());
    for (name, model, audit) in &done {
        write_model(dir.join(format!("{name}.dms")), model)?;
        fs::write(dir.join(format!("{name}.audit.json")), audit.to_json())?;
        println!(
            "{name}: {} -> {} params, {} channels removed in {:.1} ms",
            audit.params_before, audit.params_after, audit.channels_removed, audit.timings.total_ms
        );
        pruned.push(PrunedEntry {
            name: name.clone(),
            params_before: audit.params_before,
            params_after: audit.params_after,
            channels_removed: audit.channels_removed,
            total_ms: audit.timings.total_ms,
        });
    }
    write_json(&dir.join("summary.json"), &PruneSummary { pruned, collapsed })?;
    Ok(())
}

fn profile_all(cfg: &PipelineConfig, models: &[(PathBuf, ModelGraph)], data_flag: Option<&Path>) -> CliResult<Vec<ProfileRecord>> {
    if let Some(d) = data_flag {
        require(d)?;
    }
    let data = cfg.dataset(data_flag)?;
    let opts = cfg.profile_options();
    models
        .iter()
        .map(|(_, m)| {
            let r = profile(m, &data.test, &opts)?;
            log::info!("{}: accuracy {:.3}, {:.3} ms, {} bytes", r.variant_id, r.top1_accuracy, r.latency_ms.mean, r.serialized_size_bytes);
            Ok(r)
        })
        .collect()
}

fn cmd_profile(cfg: &PipelineConfig, input: &Path, data_flag: Option<&Path>) -> CliResult<()> {
    let models = load_models(input)?;
    let records = profile_all(cfg, &models, data_flag)?;
    let dir = out_dir(cfg, "profile")?;
    write_records_json(&records, dir.join("records.json"))?;
    write_records_csv(&records, dir.join("records.csv"))?;
    println!("profiled {} models -> {}", records.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ParetoSummary {
    records: usize,
    optimal: Vec<String>,
    search_efficiency: f64,
    packaged: Vec<String>,
    compressed_bytes: usize,
    uncompressed_bytes: usize,
}

fn cmd_package(cfg: &PipelineConfig, input: &Path, records_path: Option<&Path>, data_flag: Option<&Path>) -> CliResult<()> {
    let models = load_models(input)?;
    let records = match records_path {
        Some(p) => {
            require(p)?;
            let all = read_records_json(p)?;
            models
                .iter()
                .map(|(path, m)| {
                    all.iter()
                        .find(|r| r.variant_id == m.meta.name)
                        .cloned()
                        .ok_or_else(|| usage(format!("no profile record for {} ({})", m.meta.name, path.display())))
                })
                .collect::<CliResult<Vec<_>>>()?
        }
        None => profile_all(cfg, &models, data_flag)?,
    };
    let front = pareto_filter(&records, cfg.profile.delta);
    let chosen = distinct_sizes(&records, &front.optimal);
    let picked: Vec<ModelGraph> = chosen.iter().map(|&i| models[i].1.clone()).collect();
    let picked_records: Vec<ProfileRecord> = chosen.iter().map(|&i| records[i].clone()).collect();
    let pkg = deflate_portfolio(&picked, &picked_records, cfg.package.deflate_level)?;

    let dir = out_dir(cfg, "package")?;
    let path = dir.join("portfolio.dnpk");
    pkg.write(&path)?;
    let summary = ParetoSummary {
        records: records.len(),
        optimal: front.optimal.iter().map(|&i| records[i].variant_id.clone()).collect(),
        search_efficiency: front.search_efficiency,
        packaged: picked_records.iter().map(|r| r.variant_id.clone()).collect(),
        compressed_bytes: pkg.compressed_total(),
        uncompressed_bytes: pkg.raw_total(),
    };
    write_json(&dir.join("pareto.json"), &summary)?;
    println!(
        "packaged {} of {} models ({} -> {} bytes, search efficiency {:.2}%) -> {}",
        pkg.len(),
        records.len(),
        summary.uncompressed_bytes,
        summary.compressed_bytes,
        100.0 * front.search_efficiency,
        path.display()
    );
    Ok(())
}

fn cmd_simulate(cfg: &PipelineConfig, package: &Path, trace: &Path) -> CliResult<()> {
    require(package)?;
    require(trace)?;
    let pkg = PortfolioPackage::read(package)?;
    let trace = read_trace(trace)?;
    let report = simulate(&pkg, &trace, cfg.switch)?;
    let dir = out_dir(cfg, "simulation")?;
    fs::write(dir.join("report.json"), report.to_json())?;
    write_timeline_csv(&report, dir.join("timeline.csv"))?;
    println!(
        "{} samples, {} switches, mean decision overhead {:.2} ms, peak memory {} bytes -> {}",
        report.samples,
        report.switches,
        report.mean_overhead_ms,
        report.peak_memory_bytes,
        dir.display()
    );
    Ok(())
}

fn cmd_plotdata(cfg: &PipelineConfig, records: &Path) -> CliResult<()> {
    require(records)?;
    let rows = plot_data(&read_records_json(records)?);
    let dir = out_dir(cfg, "plot")?;
    let path = dir.join("plot.csv");
    write_plot_csv(&rows, &path)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}
