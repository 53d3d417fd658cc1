use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trend detector settings. Half-lives are in samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwitchPolicy {
    pub fast_half_life: f64,
    pub slow_half_life: f64,
    /// Fast/slow ratio above which load is falling (achievable QPS rising): move to a larger model.
    pub up_threshold: f64,
    /// Ratio below which QPS is falling under load: move to a smaller model.
    pub down_threshold: f64,
    pub min_dwell_ms: u64,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        SwitchPolicy {
            fast_half_life: 5.0,
            slow_half_life: 20.0,
            up_threshold: 1.15,
            down_threshold: 0.87,
            min_dwell_ms: 2000,
        }
    }
}

impl SwitchPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fast_half_life > 0.0
            && self.slow_half_life > 0.0
            && self.down_threshold > 0.0
            && self.down_threshold < self.up_threshold;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid switch policy {self:?}")))
        }
    }

    fn alpha(half_life: f64) -> f64 {
        1.0 - 0.5f64.powf(1.0 / half_life)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Stay,
    /// Next, larger model.
    SwitchUp,
    /// Previous, smaller model.
    SwitchDown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwitchStats {
    pub switches: usize,
    pub decision_overhead_ms: f64,
}

const WINDOW: usize = 64;

/// Dual-EMA QPS trend tracker over a size-ordered portfolio of `m` models.
#[derive(Debug, Clone)]
pub struct SwitchState {
    active_index: usize,
    models: usize,
    window: VecDeque<(u64, f64)>,
    ema_fast: f64,
    ema_slow: f64,
    policy: SwitchPolicy,
    last_switch_ms: Option<u64>,
    stats: SwitchStats,
}

impl SwitchState {
    /// Starts on the median model, `floor(m / 2)`.
    pub fn new(models: usize, policy: SwitchPolicy) -> Result<Self> {
        policy.validate()?;
        if models == 0 {
            return Err(Error::Config("portfolio is empty".into()));
        }
        Ok(SwitchState {
            active_index: models / 2,
            models,
            window: VecDeque::with_capacity(WINDOW),
            ema_fast: 0.0,
            ema_slow: 0.0,
            policy,
            last_switch_ms: None,
            stats: SwitchStats::default(),
        })
    }

    pub fn active_index(&self) -> usize {
        self.active_index
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn stats(&self) -> &SwitchStats {
        &self.stats
    }

    pub fn policy(&self) -> &SwitchPolicy {
        &self.policy
    }

    pub fn emas(&self) -> (f64, f64) {
        (self.ema_fast, self.ema_slow)
    }

    pub fn window(&self) -> impl Iterator<Item = &(u64, f64)> {
        self.window.iter()
    }

    /// Folds one sample into the trend and returns the policy decision; the active index moves
    /// by at most one. Out-of-order timestamps are clamped to the latest seen.
    pub fn observe(&mut self, timestamp_ms: u64, qps: f64) -> Decision {
        let ts = self.window.back().map_or(timestamp_ms, |&(t, _)| timestamp_ms.max(t));
        let first = self.window.is_empty();
        if self.window.len() == WINDOW {
            self.window.pop_front();
        }
        self.window.push_back((ts, qps));
        if first {
            self.ema_fast = qps;
            self.ema_slow = qps;
            self.last_switch_ms = Some(ts);
            return Decision::Stay;
        }
        self.ema_fast += SwitchPolicy::alpha(self.policy.fast_half_life) * (qps - self.ema_fast);
        self.ema_slow += SwitchPolicy::alpha(self.policy.slow_half_life) * (qps - self.ema_slow);
        let dwell_ok = self.last_switch_ms.is_none_or(|t| ts - t >= self.policy.min_dwell_ms);
        if !dwell_ok || self.ema_slow <= 0.0 {
            return Decision::Stay;
        }
        let ratio = self.ema_fast / self.ema_slow;
        let decision = if ratio > self.policy.up_threshold && self.active_index + 1 < self.models {
            self.active_index += 1;
            Decision::SwitchUp
        } else if ratio < self.policy.down_threshold && self.active_index > 0 {
            self.active_index -= 1;
            Decision::SwitchDown
        } else {
            return Decision::Stay;
        };
        // The new model starts from a flat trend.
        self.ema_fast = qps;
        self.ema_slow = qps;
        self.last_switch_ms = Some(ts);
        self.stats.switches += 1;
        decision
    }

    pub(crate) fn record_overhead(&mut self, ms: f64) {
        self.stats.decision_overhead_ms += ms;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_median() {
        for (m, want) in [(1, 0), (4, 2), (5, 2)] {
            assert_eq!(SwitchState::new(m, SwitchPolicy::default()).unwrap().active_index(), want);
        }
        assert!(SwitchState::new(0, SwitchPolicy::default()).is_err());
    }

    #[test]
    fn constant_stream_stays() {
        let mut s = SwitchState::new(5, SwitchPolicy::default()).unwrap();
        for t in 0..1000 {
            assert_eq!(s.observe(t * 100, 250.0), Decision::Stay);
        }
    }

    #[test]
    fn falling_qps_steps_down_one_at_a_time() {
        let mut s = SwitchState::new(4, SwitchPolicy::default()).unwrap();
        let mut prev = s.active_index();
        let mut q = 1000.0;
        for t in 0..400u64 {
            q *= 0.97;
            s.observe(t * 100, q);
            assert!(prev.abs_diff(s.active_index()) <= 1);
            if prev == 2 && s.active_index() != 2 {
                assert_eq!(s.active_index(), 1);
            }
            prev = s.active_index();
        }
        assert_eq!(s.active_index(), 0, "clamped at the smallest model");
    }

    #[test]
    fn bottom_index_with_falling_qps_stays() {
        let mut s = SwitchState::new(1, SwitchPolicy::default()).unwrap();
        let mut q = 1000.0;
        for t in 0..200u64 {
            q *= 0.9;
            assert_eq!(s.observe(t * 100, q), Decision::Stay);
        }
    }

    #[test]
    fn dwell_blocks_fast_switching() {
        let p = SwitchPolicy { min_dwell_ms: 10_000, ..Default::default() };
        let mut s = SwitchState::new(9, p).unwrap();
        let mut q = 100.0;
        let mut last = None;
        for t in 0..500u64 {
            q *= 1.05;
            if s.observe(t * 100, q) != Decision::Stay {
                if let Some(prev) = last {
                    assert!(t * 100 - prev >= 10_000);
                }
                last = Some(t * 100);
            }
        }
        assert!(s.stats().switches >= 2);
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let p = SwitchPolicy { up_threshold: 0.8, down_threshold: 0.9, ..Default::default() };
        assert!(SwitchState::new(3, p).is_err());
    }
}
