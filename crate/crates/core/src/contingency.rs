//! N−1 line-outage enumeration and ranking by voltage-collapse margin.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{apply_outage, is_connected, NetworkCase};
use crate::cpf::{run_cpf, CpfError, CpfOptions, TransferSchedule};

/// Margins closer than this share a rank.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("outage {0:?} is not in the ranking table")]
    NotInTable(OutageId),
    #[error(transparent)]
    Cpf(#[from] CpfError),
}

/// A single in-service branch of the intact case, identified by position and
/// external endpoint ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutageId {
    pub branch_index: usize,
    pub from: u32,
    pub to: u32,
}

impl OutageId {
    pub fn of(case: &NetworkCase, branch_index: usize) -> Self {
        let br = &case.branches[branch_index];
        OutageId {
            branch_index,
            from: br.from,
            to: br.to,
        }
    }

    /// Endpoint pair with the smaller id first.
    pub fn pair(&self) -> (u32, u32) {
        (self.from.min(self.to), self.from.max(self.to))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub outage: OutageId,
    pub max_lambda: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
    /// Outages whose continuation failed; not ranked.
    pub unconverged: Vec<OutageId>,
    pub base_p: Vec<f64>,
    pub base_q: Vec<f64>,
}

impl RankingTable {
    /// Number of ranked (feasible) outages.
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("outage_from,outage_to,max_lambda,rank\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.outage.from, r.outage.to, r.max_lambda, r.rank
            );
        }
        s
    }
}

/// In-service branches whose removal keeps every bus reachable.
pub fn enumerate_n1(case: &NetworkCase) -> Vec<OutageId> {
    (0..case.branches.len())
        .filter(|&k| case.branches[k].status)
        .filter(|&k| {
            apply_outage(case, k)
                .map(|cut| is_connected(&cut))
                .unwrap_or(false)
        })
        .map(|k| OutageId::of(case, k))
        .collect()
}

/// Sorts by margin, breaking ties by endpoint pair, and assigns competition
/// ranks.
pub fn assign_ranks(mut scored: Vec<(OutageId, f64)>) -> Vec<RankingRow> {
    scored.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| a.0.pair().cmp(&b.0.pair()))
            .then_with(|| a.0.branch_index.cmp(&b.0.branch_index))
    });
    let mut rows: Vec<RankingRow> = Vec::with_capacity(scored.len());
    for (k, (outage, max_lambda)) in scored.into_iter().enumerate() {
        let rank = match rows.last() {
            Some(prev) if (max_lambda - prev.max_lambda).abs() <= TIE_TOLERANCE => prev.rank,
            _ => k + 1,
        };
        rows.push(RankingRow {
            outage,
            max_lambda,
            rank,
        });
    }
    rows
}

pub fn rank_all(
    case: &NetworkCase,
    schedule: &TransferSchedule,
    opts: &CpfOptions,
) -> Result<RankingTable, OracleError> {
    rank_all_jobs(case, schedule, opts, 1)
}

/// [`rank_all`] with up to `jobs` worker threads. Output does not depend on
/// `jobs`.
pub fn rank_all_jobs(
    case: &NetworkCase,
    schedule: &TransferSchedule,
    opts: &CpfOptions,
    jobs: usize,
) -> Result<RankingTable, OracleError> {
    // The intact base case must solve; individual outages may not.
    crate::cpf::Continuation::new(case, schedule, opts)?.base_point()?;

    let outages = enumerate_n1(case);
    let margin = |o: &OutageId| -> Option<f64> {
        let cut = apply_outage(case, o.branch_index).ok()?;
        run_cpf(&cut, schedule, opts)
            .ok()
            .map(|t| t.max_lambda)
            .filter(|m| m.is_finite())
    };
    let margins: Vec<Option<f64>> = if jobs <= 1 {
        outages.iter().map(margin).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| outages.par_iter().map(margin).collect())
    };

    let mut scored = Vec::new();
    let mut unconverged = Vec::new();
    for (o, m) in outages.into_iter().zip(margins) {
        match m {
            Some(m) => scored.push((o, m)),
            None => unconverged.push(o),
        }
    }
    Ok(RankingTable {
        rows: assign_ranks(scored),
        unconverged,
        base_p: case.buses.iter().map(|b| b.pd).collect(),
        base_q: case.buses.iter().map(|b| b.qd).collect(),
    })
}

pub fn rank_of(outage: &OutageId, table: &RankingTable) -> Result<usize, OracleError> {
    table
        .rows
        .iter()
        .find(|r| r.outage == *outage)
        .map(|r| r.rank)
        .ok_or(OracleError::NotInTable(*outage))
}
