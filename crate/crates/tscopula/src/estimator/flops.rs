//! Analytic FLOP accounting.
//!
//! Counts come from operation shapes (2*m*k*n per matrix product, small
//! constants per elementwise op, attention term counts), accumulated by the
//! tape during forward passes; a backward pass is accounted as twice the
//! forward cost of the same pass. Hardware counters are never consulted, so
//! ledgers are reproducible across machines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Cumulative FLOPs of one training stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    /// All forward passes: training batches, validation sweeps, and
    /// frozen-path evaluations.
    pub forward: u64,
    /// Backward passes: 2x the forward cost of each training batch.
    pub backward: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.forward + self.backward
    }
}

/// Per-stage FLOP ledger; counts are monotone non-decreasing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub stages: BTreeMap<String, StageFlops>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one training batch: forward cost plus its 2x backward.
    pub fn record_train_batch(&mut self, stage: &str, forward: u64) {
        let e = self.stages.entry(stage.to_string()).or_default();
        e.forward += forward;
        e.backward += 2 * forward;
    }

    /// Records a gradient-free forward pass (validation, frozen paths).
    pub fn record_forward(&mut self, stage: &str, forward: u64) {
        self.stages.entry(stage.to_string()).or_default().forward += forward;
    }

    pub fn stage(&self, stage: &str) -> StageFlops {
        self.stages.get(stage).copied().unwrap_or_default()
    }

    pub fn total(&self) -> u64 {
        self.stages.values().map(|s| s.total()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_is_twice_forward_per_batch() {
        let mut ledger = FlopLedger::new();
        ledger.record_train_batch("stage1", 1000);
        ledger.record_train_batch("stage1", 500);
        let s = ledger.stage("stage1");
        assert_eq!(s.forward, 1500);
        assert_eq!(s.backward, 3000);
    }

    #[test]
    fn stages_accumulate_independently() {
        let mut ledger = FlopLedger::new();
        ledger.record_train_batch("stage1", 100);
        ledger.record_forward("stage2", 70);
        assert_eq!(ledger.stage("stage1").total(), 300);
        assert_eq!(ledger.stage("stage2").total(), 70);
        assert_eq!(ledger.total(), 370);
    }
}
