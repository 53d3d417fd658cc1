//! Dense training and iterative magnitude pruning with weight rewinding.

mod backprop;
mod imp;
mod mask;

pub use imp::{imp_portfolio, imp_portfolio_with, ImpVariant, KEEP_PER_ITERATION};
pub use mask::{rank_and_mask, rank_and_mask_scoped, MaskEntry, RankingScope, SparsityMask};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, Dataset, Targets};
use crate::error::{Error, Result};
use crate::forward::{argmax_rows, forward_with, ConvAlgo};
use crate::model::ModelGraph;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    MeanSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Epochs at whose start the learning rate is multiplied by `gamma`.
    pub milestone_steps: Vec<usize>,
    pub gamma: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Number of pruning iterations; the portfolio holds `portfolio_depth + 1` variants.
    pub portfolio_depth: usize,
    pub rewind_epoch: usize,
    pub seed: u64,
    pub loss: Loss,
    pub ranking: RankingScope,
    /// Evaluate test accuracy after every epoch (otherwise only after the last).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.05,
            milestone_steps: vec![8],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            portfolio_depth: 8,
            rewind_epoch: 1,
            seed: 0,
            loss: Loss::CrossEntropy,
            ranking: RankingScope::Global,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Checks the settings an optimiser run needs.
    pub fn validate_optimiser(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Full validation for a pruning portfolio run.
    pub fn validate(&self) -> Result<()> {
        self.validate_optimiser()?;
        if self.portfolio_depth < 1 {
            return Err(Error::Config("portfolio_depth must be at least 1".into()));
        }
        if self.rewind_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "rewind_epoch {} must be below epochs {}",
                self.rewind_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.milestone_steps.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.gamma.powi(drops as i32)
    }
}

/// Full parameter snapshot (including normalisation statistics) taken after `epoch` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: ModelGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub test_accuracy: f32,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelGraph,
    /// The rewind checkpoint (if it fell inside the run) and the final state.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<EpochLog>,
}

impl TrainRun {
    pub fn checkpoint(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }
}

/// SGD with momentum, weight decay and milestone decay; the mask is re-applied after every step.
pub fn train(model: &ModelGraph, data: &DataSplit, cfg: &TrainConfig, mask: &SparsityMask) -> Result<TrainRun> {
    train_from(model, data, cfg, mask, 0)
}

/// Trains epochs `start_epoch..cfg.epochs`, replaying the same batch order and learning-rate
/// schedule a full run would use for those epochs.
pub fn train_from(
    model: &ModelGraph,
    data: &DataSplit,
    cfg: &TrainConfig,
    mask: &SparsityMask,
    start_epoch: usize,
) -> Result<TrainRun> {
    cfg.validate_optimiser()?;
    mask.check_matches(model)?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.train.sample_shape() != model.meta.input_shape.as_slice() {
        return Err(Error::Dataset(format!(
            "samples shaped {:?}, model expects {:?}",
            data.train.sample_shape(),
            model.meta.input_shape
        )));
    }
    let mut model = model.clone();
    mask.apply(&mut model);
    let mut velocity: Vec<Vec<Vec<f32>>> = model
        .nodes()
        .iter()
        .map(|n| n.layer.params().iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        if epoch == cfg.rewind_epoch {
            checkpoints.push(Checkpoint { epoch, model: model.clone() });
        }
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = data.train.gather(chunk);
            let tape = backprop::forward_train(&mut model, &batch)?;
            let (loss, dlogits) = backprop::loss_and_grad(tape.logits(), chunk.len(), &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let grads = backprop::backward(&model, &batch, &tape, dlogits);
            sgd_step(&mut model, &grads, &mut velocity, lr, cfg);
            mask.apply(&mut model);
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let loss = (loss_sum / seen as f64) as f32;
        let test_accuracy = if cfg.eval_every_epoch || epoch + 1 == cfg.epochs {
            accuracy(&model, &data.test)?
        } else {
            f32::NAN
        };
        log::debug!("epoch {epoch}: loss {loss:.4} test acc {test_accuracy:.4}");
        log.push(EpochLog { epoch, loss, test_accuracy });
    }
    checkpoints.push(Checkpoint { epoch: cfg.epochs.max(start_epoch), model: model.clone() });
    Ok(TrainRun { model, checkpoints, log })
}

fn sgd_step(model: &mut ModelGraph, grads: &[Vec<Vec<f32>>], velocity: &mut [Vec<Vec<f32>>], lr: f32, cfg: &TrainConfig) {
    for ((node, g), v) in model.nodes_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((param, g), v) in node.layer.params_mut().into_iter().zip(g).zip(v.iter_mut()) {
            for ((w, &g), v) in param.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + cfg.weight_decay * *w;
                *v = cfg.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

/// Training log as CSV: `epoch,loss,test_accuracy`.
pub fn write_train_log(log: &[EpochLog], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in log {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

/// Top-1 accuracy in inference mode; regression sets report the fraction of exact argmax matches.
pub fn accuracy(model: &ModelGraph, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let (batch, targets) = data.gather(chunk);
        let preds = argmax_rows(&forward_with(model, &batch, ConvAlgo::Im2col)?);
        correct += match targets {
            Targets::Classes(l) => preds.iter().zip(&l).filter(|(p, l)| p == l).count(),
            Targets::Values(v) => preds.iter().zip(argmax_rows(&v)).filter(|(p, l)| **p == *l).count(),
        };
    }
    Ok(correct as f32 / data.len() as f32)
}
