//! Deflated model portfolio with median start and QPS-trend switching.

mod package;
mod simulate;
mod switch;

use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

pub use package::{deflate, deflate_portfolio, PackageEntry, PackageManifest, PortfolioPackage, DEFAULT_DEFLATE_LEVEL, PACKAGE_MAGIC, PACKAGE_VERSION};
pub use simulate::{cold_load, parse_trace, read_trace, simulate, write_timeline_csv, SimulationReport, TimelinePoint};
pub use switch::{Decision, SwitchPolicy, SwitchState, SwitchStats};

use crate::error::Result;
use crate::forward::forward;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// A serving portfolio: every blob stays compressed and exactly one model is inflated.
///
/// Inference readers clone the active `Arc` and never block on a switch; the replacement is
/// fully inflated before the pointer swap.
pub struct Runtime {
    package: PortfolioPackage,
    state: Mutex<SwitchState>,
    active: RwLock<Arc<ModelGraph>>,
}

/// Verifies every blob and inflates the median model.
pub fn init_runtime(package: PortfolioPackage, policy: SwitchPolicy) -> Result<Runtime> {
    let state = SwitchState::new(package.len(), policy)?;
    for i in 0..package.len() {
        package.inflate(i)?;
    }
    let active = package.inflate_model(state.active_index())?;
    Ok(Runtime { package, state: Mutex::new(state), active: RwLock::new(Arc::new(active)) })
}

/// Outcome of one observed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub decision: Decision,
    pub previous_index: usize,
    pub active_index: usize,
    /// Inflation plus deserialisation time when a switch happened.
    pub overhead_ms: Option<f64>,
}

impl Runtime {
    pub fn package(&self) -> &PortfolioPackage {
        &self.package
    }

    pub fn active_index(&self) -> usize {
        self.state.lock().expect("state lock").active_index()
    }

    pub fn active_model(&self) -> Arc<ModelGraph> {
        self.active.read().expect("model lock").clone()
    }

    pub fn stats(&self) -> SwitchStats {
        self.state.lock().expect("state lock").stats().clone()
    }

    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        forward(&self.active_model(), batch)
    }

    /// Feeds one QPS sample to the policy; on a switch, inflates the neighbour and swaps it in.
    /// Decisions are serialised; inference continues on the old model meanwhile.
    pub fn observe(&self, timestamp_ms: u64, qps: f64) -> Result<Observation> {
        let mut state = self.state.lock().expect("state lock");
        let previous_index = state.active_index();
        let decision = state.observe(timestamp_ms, qps);
        let mut overhead_ms = None;
        if decision != Decision::Stay {
            let t = Instant::now();
            let model = Arc::new(self.package.inflate_model(state.active_index())?);
            *self.active.write().expect("model lock") = model;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            state.record_overhead(ms);
            overhead_ms = Some(ms);
        }
        Ok(Observation { decision, previous_index, active_index: state.active_index(), overhead_ms })
    }
}
