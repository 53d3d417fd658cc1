use super::{rank_and_mask_scoped, train, train_from, EpochLog, SparsityMask, TrainConfig};
use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Each pruning iteration keeps half of the surviving weights, so variant `i` is `2^i`x compressed.
pub const KEEP_PER_ITERATION: f64 = 0.5;

/// One member of the sparse portfolio.
#[derive(Debug, Clone)]
pub struct ImpVariant {
    /// Pruning iteration; 0 is the dense model.
    pub level: usize,
    pub model: ModelGraph,
    pub mask: SparsityMask,
    pub test_accuracy: f32,
    pub log: Vec<EpochLog>,
}

impl ImpVariant {
    /// Target compression ratio `2^level`.
    pub fn nominal_ratio(&self) -> f64 {
        (1.0 / KEEP_PER_ITERATION).powi(self.level as i32)
    }

    /// Prunable weights over surviving prunable weights.
    pub fn measured_ratio(&self) -> f64 {
        self.mask.total() as f64 / self.mask.kept().max(1) as f64
    }
}

/// Iterative magnitude pruning with rewinding: train dense, then repeatedly halve the surviving
/// weights by global magnitude, rewind the survivors to the `rewind_epoch` checkpoint and retrain.
pub fn imp_portfolio(arch: &ModelGraph, data: &DataSplit, cfg: &TrainConfig) -> Result<Vec<ImpVariant>> {
    imp_portfolio_with(arch, data, cfg, |_| {})
}

/// As [`imp_portfolio`], calling `on_variant` as soon as each variant is trained.
pub fn imp_portfolio_with(
    arch: &ModelGraph,
    data: &DataSplit,
    cfg: &TrainConfig,
    mut on_variant: impl FnMut(&ImpVariant),
) -> Result<Vec<ImpVariant>> {
    cfg.validate()?;
    let dense_mask = SparsityMask::ones(arch);
    let dense = train(arch, data, cfg, &dense_mask)?;
    let rewind = dense
        .checkpoint(cfg.rewind_epoch)
        .ok_or_else(|| Error::Config(format!("no checkpoint at rewind epoch {}", cfg.rewind_epoch)))?
        .model
        .clone();
    let mut variants = Vec::with_capacity(cfg.portfolio_depth + 1);
    let first = ImpVariant {
        level: 0,
        test_accuracy: *dense.log.last().map(|l| &l.test_accuracy).unwrap_or(&f32::NAN),
        model: dense.model,
        mask: dense_mask,
        log: dense.log,
    };
    on_variant(&first);
    variants.push(first);

    for level in 1..=cfg.portfolio_depth {
        let prev = variants.last().expect("dense variant present");
        let mask = rank_and_mask_scoped(&prev.model, &prev.mask, KEEP_PER_ITERATION, cfg.ranking)?;
        log::info!(
            "pruning iteration {level}: {} of {} weights kept",
            mask.kept(),
            mask.total()
        );
        let run = train_from(&rewind, data, cfg, &mask, cfg.rewind_epoch)?;
        let v = ImpVariant {
            level,
            test_accuracy: run.log.last().map_or(f32::NAN, |l| l.test_accuracy),
            model: run.model,
            mask,
            log: run.log,
        };
        on_variant(&v);
        variants.push(v);
    }
    Ok(variants)
}
