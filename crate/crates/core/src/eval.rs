//! Scoring generated contingencies against the exhaustive N−1 ranking and
//! comparing generated critical loads with the continuation solution.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{apply_outage, NetworkCase};
use crate::contingency::{rank_all, rank_of, OutageId, RankingTable};
use crate::cpf::{run_cpf, transfer_schedule, CpfOptions};
use crate::dataset::{attempt_seed, perturb_loads, GridEncoder, GridImage, Normalizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n_eval_samples must be at least 1")]
    NoSamples,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_eval_samples: usize,
    pub seed: u64,
    pub target_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval_samples: 100,
            seed: 1,
            target_scale: 2.5,
        }
    }
}

/// Median rank of `m` feasible outages, `⌈m/2⌉`.
pub fn threshold_rank(m: usize) -> usize {
    m.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub base_seed: u64,
    pub outage: Option<OutageId>,
    pub rank: Option<usize>,
    /// Feasible outages at this base state.
    pub m: usize,
    pub below_threshold: bool,
    pub mae_p: Option<f64>,
    pub mae_q: Option<f64>,
    /// Why the row is excluded from the score, if it is.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `histogram[r-1]` counts scored rows with rank `r`.
    pub histogram: Vec<usize>,
    pub score: f64,
    /// Mean of `threshold_rank(M)/M` over scored rows.
    pub uniform_baseline: f64,
    /// Mean over rows with a computable MAE; `None` if there are none.
    pub mae_p: Option<f64>,
    pub mae_q: Option<f64>,
    pub exclusions: usize,
}

impl EvalReport {
    /// Fraction of scored rows with rank in `1..=k`.
    pub fn top_k_fraction(&self, k: usize) -> f64 {
        let scored: usize = self.histogram.iter().sum();
        if scored == 0 {
            return 0.0;
        }
        self.histogram.iter().take(k).sum::<usize>() as f64 / scored as f64
    }

    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let scored: Vec<&EvalRow> = rows.iter().filter(|r| r.excluded.is_none()).collect();
        let max_m = scored.iter().map(|r| r.m).max().unwrap_or(0);
        let mut histogram = vec![0; max_m];
        for r in &scored {
            if let Some(k) = r.rank {
                histogram[k - 1] += 1;
            }
        }
        let n = scored.len();
        let mean = |f: &dyn Fn(&EvalRow) -> Option<f64>| {
            let v: Vec<f64> = scored.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let (score, uniform_baseline) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                scored.iter().filter(|r| r.below_threshold).count() as f64 / n as f64,
                scored
                    .iter()
                    .map(|r| threshold_rank(r.m) as f64 / r.m as f64)
                    .sum::<f64>()
                    / n as f64,
            )
        };
        EvalReport {
            histogram,
            score,
            uniform_baseline,
            mae_p: mean(&|r| r.mae_p),
            mae_q: mean(&|r| r.mae_q),
            exclusions: rows.len() - n,
            rows,
        }
    }
}

/// Mean absolute difference over `load_buses` after normalizing with
/// channels 3 (P) and 4 (Q) of `nz`.
pub fn mae_profiles(
    generated: (&[f64], &[f64]),
    actual: (&[f64], &[f64]),
    normalizer: &Normalizer,
    load_buses: &[usize],
) -> Result<(f64, f64), EvalError> {
    for (g, a) in [(generated.0, actual.0), (generated.1, actual.1)] {
        if g.len() != a.len() {
            return Err(EvalError::LengthMismatch(g.len(), a.len()));
        }
    }
    if load_buses.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mae = |g: &[f64], a: &[f64], c: usize| {
        load_buses
            .iter()
            .map(|&i| (normalizer.normalize(c, g[i]) - normalizer.normalize(c, a[i])).abs())
            .sum::<f64>()
            / load_buses.len() as f64
    };
    Ok((mae(generated.0, actual.0, 3), mae(generated.1, actual.1, 4)))
}

/// Buses carrying load in `case`.
pub fn load_buses(case: &NetworkCase) -> Vec<usize> {
    (0..case.buses.len())
        .filter(|&i| case.buses[i].pd != 0.0 || case.buses[i].qd != 0.0)
        .collect()
}

/// Oracle tables keyed by the exact base-load bit pattern.
#[derive(Debug, Default)]
pub struct OracleCache {
    tables: Mutex<HashMap<Vec<u64>, RankingTable>>,
}

impl OracleCache {
    pub fn table(&self, perturbed: &NetworkCase, scale: f64, opts: &CpfOptions) -> Option<RankingTable> {
        let key: Vec<u64> = perturbed
            .buses
            .iter()
            .flat_map(|b| [b.pd.to_bits(), b.qd.to_bits()])
            .chain([scale.to_bits()])
            .collect();
        if let Some(t) = self.tables.lock().expect("cache lock").get(&key) {
            return Some(t.clone());
        }
        let sched = transfer_schedule(perturbed, scale).ok()?;
        let table = rank_all(perturbed, &sched, opts).ok()?;
        self.tables.lock().expect("cache lock").insert(key, table.clone());
        Some(table)
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Base state of evaluation sample `i`: its seed, the perturbed case and the
/// RNG positioned after the perturbation draws (used for sampling).
pub fn eval_base(case: &NetworkCase, seed: u64, i: usize) -> (u64, NetworkCase, ChaCha8Rng) {
    let base_seed = attempt_seed(seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let perturbed = perturb_loads(case, &mut rng);
    (base_seed, perturbed, rng)
}

/// Scores one generated image against the oracle for its base state.
pub fn score_sample(
    encoder: &GridEncoder,
    perturbed: &NetworkCase,
    generated: &GridImage,
    base_seed: u64,
    scale: f64,
    opts: &CpfOptions,
    cache: &OracleCache,
) -> EvalRow {
    let mut row = EvalRow {
        base_seed,
        outage: None,
        rank: None,
        m: 0,
        below_threshold: false,
        mae_p: None,
        mae_q: None,
        excluded: None,
    };
    let decoded = match encoder.decode(generated) {
        Ok(d) => d,
        Err(e) => {
            row.excluded = Some(format!("decode: {e}"));
            return row;
        }
    };
    row.outage = Some(decoded.outage);
    let Some(table) = cache.table(perturbed, scale, opts) else {
        row.excluded = Some("oracle: base case did not solve".into());
        return row;
    };
    row.m = table.m();
    match rank_of(&decoded.outage, &table) {
        Ok(rank) => {
            row.rank = Some(rank);
            row.below_threshold = rank <= threshold_rank(row.m);
        }
        Err(_) => {
            row.excluded = Some("outage infeasible or unranked".into());
            return row;
        }
    }
    let sched = transfer_schedule(perturbed, scale).expect("schedule built for the oracle");
    let lam = apply_outage(perturbed, decoded.outage.branch_index)
        .ok()
        .and_then(|cut| run_cpf(&cut, &sched, opts).ok())
        .map(|t| t.max_lambda);
    if let Some(lam) = lam {
        let mva = perturbed.base_mva;
        let actual = |c: usize| -> Vec<f64> {
            perturbed
                .buses
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let base = if c == 0 { b.pd } else { b.qd };
                    let d = if c == 0 { sched.dp()[i] } else { sched.dq()[i] };
                    base + lam * d * mva
                })
                .collect()
        };
        let (ap, aq) = (actual(0), actual(1));
        let loads = load_buses(&encoder.case);
        if let Ok((p, q)) = mae_profiles(
            (&decoded.crit_p, &decoded.crit_q),
            (&ap, &aq),
            &encoder.normalizer,
            &loads,
        ) {
            row.mae_p = Some(p);
            row.mae_q = Some(q);
        }
    }
    row
}

/// Runs the evaluation with an arbitrary generator mapping base conditions
/// (and per-sample RNGs) to generated images. Generation is called on chunks
/// of at most `chunk` samples.
pub fn evaluate_with<G>(
    encoder: &GridEncoder,
    config: &EvalConfig,
    opts: &CpfOptions,
    jobs: usize,
    chunk: usize,
    generate: G,
) -> Result<EvalReport, EvalError>
where
    G: Fn(&[GridImage], &mut [ChaCha8Rng]) -> Vec<GridImage> + Sync,
{
    if config.n_eval_samples == 0 {
        return Err(EvalError::NoSamples);
    }
    let bases: Vec<(u64, NetworkCase, ChaCha8Rng)> = (0..config.n_eval_samples)
        .map(|i| eval_base(&encoder.case, config.seed, i))
        .collect();
    let cache = OracleCache::default();
    let chunk = chunk.max(1);
    let work = || -> Vec<EvalRow> {
        let images: Vec<GridImage> = bases
            .par_chunks(chunk)
            .flat_map_iter(|part| {
                let conds: Vec<GridImage> = part
                    .iter()
                    .map(|(_, p, _)| {
                        let bp: Vec<f64> = p.buses.iter().map(|b| b.pd).collect();
                        let bq: Vec<f64> = p.buses.iter().map(|b| b.qd).collect();
                        encoder.encode_base(&bp, &bq)
                    })
                    .collect();
                let mut rngs: Vec<ChaCha8Rng> = part.iter().map(|(_, _, r)| r.clone()).collect();
                generate(&conds, &mut rngs)
            })
            .collect();
        bases
            .par_iter()
            .zip(images.par_iter())
            .map(|((seed, perturbed, _), img)| {
                score_sample(encoder, perturbed, img, *seed, config.target_scale, opts, &cache)
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let rows = pool.install(work);
    Ok(EvalReport::from_rows(rows))
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("base_seed,outage_from,outage_to,rank,m,below_threshold,mae_p,mae_q,excluded\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.base_seed,
            fmt_opt(&r.outage.map(|o| o.from)),
            fmt_opt(&r.outage.map(|o| o.to)),
            fmt_opt(&r.rank),
            r.m,
            r.below_threshold,
            fmt_opt(&r.mae_p),
            fmt_opt(&r.mae_q),
            r.excluded.clone().unwrap_or_default()
        );
    }
    s
}

pub fn histogram_csv(report: &EvalReport) -> String {
    let mut s = String::from("rank,count\n");
    for (k, c) in report.histogram.iter().enumerate() {
        let _ = writeln!(s, "{},{}", k + 1, c);
    }
    s
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;

/// Minimal bar chart on a fixed 800×500 canvas.
pub fn bar_chart_svg(title: &str, x_label: &str, y_label: &str, labels: &[String], values: &[f64], y_max: f64) -> String {
    let (left, right, top, bottom) = (70.0, 20.0, 50.0, 60.0);
    let (pw, ph) = (SVG_W - left - right, SVG_H - top - bottom);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="18">{}</text>"#,
        SVG_W / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = top + ph - ph * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="12">{}</text>"#,
            left - 6.0,
            y + 4.0,
            trim_float(v)
        );
    }
    let n = values.len().max(1) as f64;
    let slot = pw / n;
    for (k, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = (v / y_max).clamp(0.0, 1.0) * ph;
        let x = left + slot * k as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4878a8"/>"##,
            top + ph - h,
            slot * 0.7
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
            x + slot * 0.35,
            top + ph + 18.0,
            xml_escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        left + pw / 2.0,
        SVG_H - 15.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" font-family="sans-serif" font-size="14" transform="rotate(-90 20 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        xml_escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Summary document: headline numbers plus the caller's configuration echo.
pub fn summary_json(report: &EvalReport, config_echo: &serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "score": report.score,
        "uniform_baseline": report.uniform_baseline,
        "top3_fraction": report.top_k_fraction(3),
        "mae_p": report.mae_p,
        "mae_q": report.mae_q,
        "n_samples": report.rows.len(),
        "exclusions": report.exclusions,
        "histogram": report.histogram,
        "config": config_echo,
    })
}

/// Writes report.csv, histogram.csv, summary.json, rank_frequency.svg and
/// score.svg into `out_dir`.
pub fn emit_report(report: &EvalReport, config_echo: &serde_json::Value, out_dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), report_csv(report))?;
    std::fs::write(out_dir.join("histogram.csv"), histogram_csv(report))?;
    let summary = serde_json::to_string_pretty(&summary_json(report, config_echo)).expect("json");
    std::fs::write(out_dir.join("summary.json"), summary + "\n")?;
    let labels: Vec<String> = (1..=report.histogram.len()).map(|k| k.to_string()).collect();
    let counts: Vec<f64> = report.histogram.iter().map(|&c| c as f64).collect();
    let y_max = counts.iter().cloned().fold(0.0, f64::max);
    std::fs::write(
        out_dir.join("rank_frequency.svg"),
        bar_chart_svg("Oracle rank of generated contingencies", "rank", "count", &labels, &counts, y_max),
    )?;
    std::fs::write(
        out_dir.join("score.svg"),
        bar_chart_svg(
            "Share ranked at or above the median",
            "",
            "fraction",
            &["generated".to_string(), "uniform".to_string()],
            &[report.score, report.uniform_baseline],
            1.0,
        ),
    )?;
    Ok(())
}
