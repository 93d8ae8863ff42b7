//! `report.json` layout and the ranked text table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostBreakdown;
use crate::error::Result;
use crate::optimizer::{CandidateRecord, FailedCandidate};
use crate::scalar::Scalar;
use crate::types::{load_json, save_json, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ReportEntry<T> {
    pub rank: usize,
    #[serde(flatten)]
    pub strategy: Strategy,
    pub estimated: CostBreakdown<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Report<T> {
    pub candidates: Vec<ReportEntry<T>>,
    /// Rank of the candidate with the lowest simulated time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailedCandidate>,
}

impl<T: Scalar> Report<T> {
    pub fn new(
        records: &[CandidateRecord<T>],
        best: Option<usize>,
        failures: Vec<FailedCandidate>,
    ) -> Self {
        let candidates = records
            .iter()
            .map(|r| ReportEntry {
                rank: r.rank,
                strategy: r.strategy.clone(),
                estimated: r.estimated.clone(),
                simulated: r.simulated,
            })
            .collect();
        Self {
            candidates,
            best_rank: best.map(|i| records[i].rank),
            failures,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn entry(&self, rank: usize) -> Option<&ReportEntry<T>> {
        self.candidates.iter().find(|c| c.rank == rank)
    }

    /// Fixed-width table of the first `limit` candidates.
    pub fn table(&self, limit: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>4}  {:>3} {:>3} {:>3} {:>4}  {:>12}  {:>12}  {:>12}  {:>12}  cuts",
            "rank", "pp", "dp", "tmp", "mbs", "estimated", "pipeline", "dpsync", "simulated"
        );
        for c in self.candidates.iter().take(limit) {
            let d = c.strategy.degrees;
            let sim = c
                .simulated
                .map_or_else(|| "-".to_string(), |t| format!("{t:.6}"));
            let _ = writeln!(
                out,
                "{:>4}  {:>3} {:>3} {:>3} {:>4}  {:>12.6}  {:>12.6}  {:>12.6}  {:>12}  {:?}",
                c.rank,
                d.pp,
                d.dp,
                d.tmp,
                c.strategy.mbs,
                c.estimated.total,
                c.estimated.pipeline_time,
                c.estimated.dpsync_time,
                sim,
                c.strategy.assignment.cuts
            );
        }
        out
    }
}
