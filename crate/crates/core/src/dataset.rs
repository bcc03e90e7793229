//! Worst-contingency training corpus and its image encoding.
//!
//! Each attempt perturbs every bus load by a random factor in `[0.5, 1.5]`,
//! removes one in-service line chosen uniformly, and runs the continuation
//! solver. Converged attempts are sorted by margin and the lowest tenth is
//! kept. Samples are encoded as six `N×N` channels:
//! `[base P, base Q, base C, critical P, critical Q, post-outage C]`, with the
//! load channels on the diagonal and min–max normalized.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{apply_outage, connection_matrix, is_connected, ConnectionMatrix, NetworkCase};
use crate::contingency::OutageId;
use crate::cpf::{run_cpf, transfer_schedule, CpfOptions};

pub const CHANNELS: usize = 6;
/// Fraction of converged attempts kept.
pub const KEEP_FRACTION: f64 = 0.1;
pub const MIN_CONVERGED: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("only {converged} of {attempts} attempts converged (need at least {MIN_CONVERGED})")]
    TooFewConverged { attempts: usize, converged: usize },
    #[error("need at least 10 attempts, got {0}")]
    TooFewAttempts(usize),
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("tensor is {got}×{got}, case has {expected} buses")]
    Dimension { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencySample {
    /// Perturbed base loads, MW / MVAr.
    pub base_p: Vec<f64>,
    pub base_q: Vec<f64>,
    pub outage: OutageId,
    /// Loads at the collapse point, MW / MVAr.
    pub crit_p: Vec<f64>,
    pub crit_q: Vec<f64>,
    pub max_lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscardReason {
    Islanded,
    CpfFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attempt {
    Sample(ContingencySample),
    Discard(DiscardReason),
}

/// Maps a standard normal draw onto a load multiplier in `[0.5, 1.5]`.
pub fn load_factor(z: f64) -> f64 {
    1.0 + 0.5 * (z / 3.0).clamp(-1.0, 1.0)
}

/// Scales each bus load (P and Q by the same factor) by an independent
/// random multiplier.
pub fn perturb_loads<R: Rng + ?Sized>(case: &NetworkCase, rng: &mut R) -> NetworkCase {
    let factors: Vec<f64> = (0..case.buses.len())
        .map(|_| load_factor(rng.sample(StandardNormal)))
        .collect();
    scale_loads(case, &factors)
}

/// Multiplies bus `i`'s P and Q load by `factors[i]`.
pub fn scale_loads(case: &NetworkCase, factors: &[f64]) -> NetworkCase {
    let mut out = case.clone();
    for (bus, &f) in out.buses.iter_mut().zip(factors) {
        bus.pd *= f;
        bus.qd *= f;
    }
    out
}

/// Seed of attempt `index` under `master_seed`.
pub fn attempt_seed(master_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Runs the continuation solver on `perturbed` with branch `branch_index`
/// removed.
pub fn evaluate_outage(
    perturbed: &NetworkCase,
    branch_index: usize,
    schedule_scale: f64,
    opts: &CpfOptions,
    seed: u64,
) -> Attempt {
    let Ok(cut) = apply_outage(perturbed, branch_index) else {
        return Attempt::Discard(DiscardReason::Islanded);
    };
    if !is_connected(&cut) {
        return Attempt::Discard(DiscardReason::Islanded);
    }
    let Ok(schedule) = transfer_schedule(perturbed, schedule_scale) else {
        return Attempt::Discard(DiscardReason::CpfFailed);
    };
    let trace = match run_cpf(&cut, &schedule, opts) {
        Ok(t) if t.max_lambda > 0.0 && t.max_lambda.is_finite() => t,
        _ => return Attempt::Discard(DiscardReason::CpfFailed),
    };
    let base_p: Vec<f64> = perturbed.buses.iter().map(|b| b.pd).collect();
    let base_q: Vec<f64> = perturbed.buses.iter().map(|b| b.qd).collect();
    let mva = perturbed.base_mva;
    let crit = |base: &[f64], delta: &[f64]| -> Vec<f64> {
        base.iter()
            .zip(delta)
            .map(|(b, d)| b + trace.max_lambda * d * mva)
            .collect()
    };
    Attempt::Sample(ContingencySample {
        crit_p: crit(&base_p, schedule.dp()),
        crit_q: crit(&base_q, schedule.dq()),
        base_p,
        base_q,
        outage: OutageId::of(perturbed, branch_index),
        max_lambda: trace.max_lambda,
        seed,
    })
}

/// One attempt: perturb loads, draw an in-service line uniformly, solve.
pub fn generate_sample(
    case: &NetworkCase,
    schedule_scale: f64,
    opts: &CpfOptions,
    seed: u64,
) -> Attempt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed = perturb_loads(case, &mut rng);
    let live: Vec<usize> = (0..case.branches.len())
        .filter(|&k| case.branches[k].status)
        .collect();
    if live.is_empty() {
        return Attempt::Discard(DiscardReason::Islanded);
    }
    let branch = live[rng.gen_range(0..live.len())];
    evaluate_outage(&perturbed, branch, schedule_scale, opts, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Kept samples, ascending by margin.
    pub samples: Vec<ContingencySample>,
    pub attempts: usize,
    pub converged: usize,
    /// Smallest margin among converged attempts that were not kept.
    pub rejected_min_lambda: Option<f64>,
}

/// Generates `attempts` samples from `master_seed` and keeps the lowest-margin
/// tenth of the converged ones.
pub fn generate_dataset(
    case: &NetworkCase,
    attempts: usize,
    schedule_scale: f64,
    master_seed: u64,
    opts: &CpfOptions,
    jobs: usize,
) -> Result<Dataset, DatasetError> {
    if attempts < 10 {
        return Err(DatasetError::TooFewAttempts(attempts));
    }
    let run = |i: usize| generate_sample(case, schedule_scale, opts, attempt_seed(master_seed, i as u64));
    let results: Vec<Attempt> = if jobs <= 1 {
        (0..attempts).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| (0..attempts).into_par_iter().map(run).collect())
    };
    let mut converged: Vec<ContingencySample> = results
        .into_iter()
        .filter_map(|a| match a {
            Attempt::Sample(s) => Some(s),
            Attempt::Discard(_) => None,
        })
        .collect();
    let n_conv = converged.len();
    if n_conv < MIN_CONVERGED {
        return Err(DatasetError::TooFewConverged {
            attempts,
            converged: n_conv,
        });
    }
    converged.sort_by(|a, b| a.max_lambda.total_cmp(&b.max_lambda).then(a.seed.cmp(&b.seed)));
    let keep = (KEEP_FRACTION * n_conv as f64).ceil() as usize;
    let rejected_min_lambda = converged.get(keep).map(|s| s.max_lambda);
    converged.truncate(keep);
    Ok(Dataset {
        samples: converged,
        attempts,
        converged: n_conv,
        rejected_min_lambda,
    })
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[ContingencySample]) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<ContingencySample>, DatasetError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: k + 1, source })?,
        );
    }
    Ok(out)
}

/// Per-channel min–max statistics. Connection channels (2, 5) are stored as
/// `(0, 1)` and never rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; CHANNELS],
    pub max: [f64; CHANNELS],
}

impl Normalizer {
    /// Fits load-channel ranges over the diagonal values of `samples`.
    pub fn fit(samples: &[ContingencySample]) -> Self {
        let mut min = [f64::INFINITY; CHANNELS];
        let mut max = [f64::NEG_INFINITY; CHANNELS];
        for s in samples {
            for (c, values) in [(0, &s.base_p), (1, &s.base_q), (3, &s.crit_p), (4, &s.crit_q)] {
                for &v in values {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        for c in [2, 5] {
            min[c] = 0.0;
            max[c] = 1.0;
        }
        for c in [0, 1, 3, 4] {
            if !min[c].is_finite() {
                min[c] = 0.0;
                max[c] = 1.0;
            } else if max[c] <= min[c] {
                max[c] = min[c] + 1.0;
            }
        }
        Normalizer { min, max }
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        match channel {
            2 | 5 => v,
            c => (v - self.min[c]) / (self.max[c] - self.min[c]),
        }
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        match channel {
            2 | 5 => v,
            c => self.min[c] + v * (self.max[c] - self.min[c]),
        }
    }
}

/// A `6×N×N` sample tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub n: usize,
    pub data: Vec<f64>,
}

impl GridImage {
    pub fn zeros(n: usize) -> Self {
        GridImage {
            n,
            data: vec![0.0; CHANNELS * n * n],
        }
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.n + i) * self.n + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.n + i) * self.n + j] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.n * self.n;
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.n * self.n;
        &mut self.data[c * s..(c + 1) * s]
    }
}

/// Loads and outage recovered from a generated tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub base_p: Vec<f64>,
    pub base_q: Vec<f64>,
    pub crit_p: Vec<f64>,
    pub crit_q: Vec<f64>,
    pub outage: OutageId,
    /// Intact edges whose channel-5 value fell below 0.5.
    pub removed_by_threshold: Vec<(u32, u32)>,
}

/// Case-specific encoding context: intact topology and the bus index map.
#[derive(Debug, Clone)]
pub struct GridEncoder {
    pub case: NetworkCase,
    pub intact: ConnectionMatrix,
    pub normalizer: Normalizer,
}

impl GridEncoder {
    pub fn new(case: &NetworkCase, normalizer: Normalizer) -> Self {
        GridEncoder {
            intact: connection_matrix(case),
            case: case.clone(),
            normalizer,
        }
    }

    pub fn n(&self) -> usize {
        self.case.n_buses()
    }

    pub fn encode(&self, s: &ContingencySample) -> GridImage {
        let n = self.n();
        let mut img = GridImage::zeros(n);
        let nz = &self.normalizer;
        for i in 0..n {
            img.set(0, i, i, nz.normalize(0, s.base_p[i]));
            img.set(1, i, i, nz.normalize(1, s.base_q[i]));
            img.set(3, i, i, nz.normalize(3, s.crit_p[i]));
            img.set(4, i, i, nz.normalize(4, s.crit_q[i]));
        }
        let after = apply_outage(&self.case, s.outage.branch_index)
            .map(|cut| connection_matrix(&cut))
            .unwrap_or_else(|_| self.intact.clone());
        for i in 0..n {
            for j in 0..n {
                img.set(2, i, j, f64::from(self.intact.get(i, j)));
                img.set(5, i, j, f64::from(after.get(i, j)));
            }
        }
        img
    }

    /// Base-state channels only (0–2); the target channels are left zero.
    pub fn encode_base(&self, base_p: &[f64], base_q: &[f64]) -> GridImage {
        let n = self.n();
        let mut img = GridImage::zeros(n);
        for i in 0..n {
            img.set(0, i, i, self.normalizer.normalize(0, base_p[i]));
            img.set(1, i, i, self.normalizer.normalize(1, base_q[i]));
            for j in 0..n {
                img.set(2, i, j, f64::from(self.intact.get(i, j)));
            }
        }
        img
    }

    /// Lowest-index in-service branch joining internal buses `i` and `j`.
    fn branch_between(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = (self.case.buses[i].id, self.case.buses[j].id);
        self.case
            .branches
            .iter()
            .position(|br| br.status && ((br.from, br.to) == (a, b) || (br.from, br.to) == (b, a)))
    }

    pub fn decode(&self, img: &GridImage) -> Result<Decoded, DatasetError> {
        let n = self.n();
        if img.n != n {
            return Err(DatasetError::Dimension {
                expected: n,
                got: img.n,
            });
        }
        if img.data.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite);
        }
        let nz = &self.normalizer;
        let diag = |c: usize| -> Vec<f64> { (0..n).map(|i| nz.denormalize(c, img.get(c, i, i))).collect() };
        let p_floor = 0.0_f64.min(nz.min[3]);
        let q_floor = 0.0_f64.min(nz.min[4]);
        let crit_p = diag(3).into_iter().map(|v| v.max(p_floor)).collect();
        let crit_q = diag(4).into_iter().map(|v| v.max(q_floor)).collect();

        let mut best: Option<((usize, usize), f64)> = None;
        let mut removed = Vec::new();
        for (i, j) in self.intact.edges() {
            let v = 0.5 * (img.get(5, i, j) + img.get(5, j, i));
            if v < 0.5 {
                removed.push((self.case.buses[i].id, self.case.buses[j].id));
            }
            if best.map_or(true, |(_, b)| v < b) {
                best = Some(((i, j), v));
            }
        }
        let ((i, j), _) = best.ok_or(DatasetError::NonFinite)?;
        let k = self
            .branch_between(i, j)
            .expect("intact edge has an in-service branch");
        Ok(Decoded {
            base_p: diag(0),
            base_q: diag(1),
            crit_p,
            crit_q,
            outage: OutageId::of(&self.case, k),
            removed_by_threshold: removed,
        })
    }
}
