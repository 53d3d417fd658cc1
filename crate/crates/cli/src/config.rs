use std::path::{Path, PathBuf};

use modelshift::data::{load_raw_dir, synthetic_blobs, BlobConfig, DataSplit};
use modelshift::model::Architecture;
use modelshift::profile::{LatencySource, ProfileOptions, DEFAULT_DELTA};
use modelshift::prune::{PruneMode, PruneOptions};
use modelshift::runtime::{SwitchPolicy, DEFAULT_DEFLATE_LEVEL};
use modelshift::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{usage, CliResult};
use crate::Cli;

/// Everything a pipeline run needs. Read from TOML; command-line flags win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub architecture: String,
    /// Drives weight initialisation and batch order.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: PruneSection,
    pub profile: ProfileSection,
    pub package: PackageSection,
    pub switch: SwitchPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            architecture: "toy-cnn".into(),
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            prune: PruneSection::default(),
            profile: ProfileSection::default(),
            package: PackageSection::default(),
            switch: SwitchPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Raw-tensor dataset directory; the bundled synthetic set is generated when absent.
    pub dir: Option<PathBuf>,
    pub blobs: BlobConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSection {
    pub strict: bool,
    /// Rebuild one layer at a time instead of in a single batch.
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSection {
    pub reps: usize,
    pub warmup: usize,
    pub latency: LatencySource,
    /// Relative tolerance for folding near-identical Pareto entries.
    pub delta: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let o = ProfileOptions::default();
        ProfileSection { reps: o.reps, warmup: o.warmup, latency: o.latency, delta: DEFAULT_DELTA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackageSection {
    pub deflate_level: u32,
}

impl Default for PackageSection {
    fn default() -> Self {
        PackageSection { deflate_level: DEFAULT_DEFLATE_LEVEL }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Config file (if any) with the command-line overrides applied, then validated.
    pub fn resolve(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.out = out.clone();
        }
        if let Some(n) = cli.portfolio_depth {
            cfg.train.portfolio_depth = n;
        }
        if cli.strict_prune {
            cfg.prune.strict = true;
        }
        if let Some(level) = cli.deflate_level {
            cfg.package.deflate_level = level;
        }
        if let Some(src) = cli.latency_source {
            cfg.profile.latency = src.into();
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.architecture()?;
        self.train.validate()?;
        self.switch.validate()?;
        if self.package.deflate_level > 9 {
            return Err(usage(format!("deflate level {} is outside 0..=9", self.package.deflate_level)));
        }
        if self.profile.reps < 3 {
            return Err(usage(format!("profile.reps must be at least 3, got {}", self.profile.reps)));
        }
        if !(self.profile.delta >= 0.0 && self.profile.delta < 1.0) {
            return Err(usage(format!("profile.delta must be in [0, 1), got {}", self.profile.delta)));
        }
        Ok(())
    }

    pub fn architecture(&self) -> CliResult<Architecture> {
        Ok(self.architecture.parse()?)
    }

    pub fn prune_options(&self) -> PruneOptions {
        let mode = if self.prune.strict { PruneMode::Strict } else { PruneMode::Default };
        PruneOptions { mode, sequential: self.prune.sequential }
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            reps: self.profile.reps,
            warmup: self.profile.warmup,
            latency: self.profile.latency,
            ..ProfileOptions::default()
        }
    }

    /// The dataset named by `--data`, else `data.dir`, else the bundled synthetic set.
    pub fn dataset(&self, flag: Option<&Path>) -> CliResult<DataSplit> {
        match flag.or(self.data.dir.as_deref()) {
            Some(dir) => {
                if !dir.join("meta.json").is_file() {
                    return Err(usage(format!("dataset directory {} has no meta.json", dir.display())));
                }
                Ok(load_raw_dir(dir)?)
            }
            None => Ok(synthetic_blobs(&self.data.blobs)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 4\n[train]\nepochs = 3\n[data.blobs]\nnoise = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data.blobs.noise, 0.5);
        assert_eq!(cfg.package.deflate_level, DEFAULT_DEFLATE_LEVEL);
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&text).unwrap(), cfg);
    }
}
