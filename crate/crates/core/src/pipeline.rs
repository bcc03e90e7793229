//! End-to-end run: data generation, training, sampling and evaluation, each
//! stage persisted in the output directory and skipped when its inputs are
//! unchanged.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::case::{parse_matpower_case, NetworkCase};
use crate::checkpoint::{Checkpoint, ScheduleParams};
use crate::cpf::CpfOptions;
use crate::dataset::{attempt_seed, generate_dataset, read_jsonl, write_jsonl, GridEncoder, GridImage, Normalizer};
use crate::diffusion::{loss_history_csv, sample_batch, train, SampleOptions, TrainConfig, TrainingPair};
use crate::eval::{emit_report, eval_base, score_sample, EvalReport, OracleCache};
use crate::unet::{DenoiserParams, UNetConfig};

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Input,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &'static str, kind: FailureKind, e: impl std::fmt::Display) -> Self {
        PipelineError {
            stage,
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub attempts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { attempts: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Group-norm groups; 0 disables normalization.
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 32,
            depth: 2,
            time_embed_dim: 64,
            groups: 4,
        }
    }
}

impl ModelConfig {
    pub fn unet(&self, n: usize) -> UNetConfig {
        let m = 1 << self.depth;
        UNetConfig {
            in_channels: crate::dataset::CHANNELS,
            base_width: self.base_width,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            pad_to: n.div_ceil(m) * m,
            groups: self.groups,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub ema_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainingConfig {
            t_max: d.t_max,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            lr: d.lr,
            batch: d.batch,
            epochs: d.epochs,
            ema_decay: d.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_eval_samples: usize,
    /// Samples generated per network call.
    pub chunk: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_eval_samples: 100,
            chunk: 25,
        }
    }
}

/// Complete run description; echoed into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Built-in case name (`ieee6`, `ieee14`, `ieee30`) or a MATPOWER file.
    pub case: String,
    pub out_dir: PathBuf,
    pub target_scale: f64,
    pub master_seed: u64,
    pub dataset: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case: "ieee6".into(),
            out_dir: PathBuf::from("out"),
            target_scale: 2.5,
            master_seed: 0,
            dataset: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Independent sub-seeds derived from the master seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
}

impl RunConfig {
    pub fn seed(&self, stream: u64) -> u64 {
        if stream == streams::DATA {
            self.master_seed
        } else {
            attempt_seed(self.master_seed, 1_000_000 + stream)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            t_max: t.t_max,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            lr: t.lr,
            batch: t.batch,
            epochs: t.epochs,
            seed: self.seed(streams::TRAIN),
            ema_decay: t.ema_decay,
        }
    }

    pub fn eval_config(&self) -> crate::eval::EvalConfig {
        crate::eval::EvalConfig {
            n_eval_samples: self.eval.n_eval_samples,
            seed: self.seed(streams::EVAL),
            target_scale: self.target_scale,
        }
    }
}

/// Loads a built-in case by name or parses a MATPOWER file.
pub fn load_case(spec: &str) -> Result<NetworkCase, PipelineError> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::new("case", FailureKind::Io, e))?;
        return parse_matpower_case(&text).map_err(|e| PipelineError::new("case", FailureKind::Input, e));
    }
    crate::cases::by_name(spec).ok_or_else(|| {
        PipelineError::new("case", FailureKind::Input, format!("no case file or built-in case named {spec:?}"))
    })
}

fn digest(parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("json"));
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Config hashes for each stage; each includes its upstream hash.
#[derive(Debug, Clone, PartialEq)]
pub struct StageKeys {
    pub data: String,
    pub train: String,
    pub sample: String,
    pub eval: String,
}

pub fn stage_keys(config: &RunConfig, case: &NetworkCase) -> StageKeys {
    use serde_json::json;
    let data = digest(&[
        &serde_json::to_value(case).expect("json"),
        &json!({"target_scale": config.target_scale, "seed": config.master_seed}),
        &serde_json::to_value(&config.dataset).expect("json"),
    ]);
    let train = digest(&[
        &json!(data),
        &serde_json::to_value(&config.model).expect("json"),
        &serde_json::to_value(config.train_config()).expect("json"),
        &json!(config.seed(streams::INIT)),
    ]);
    let sample = digest(&[&json!(train), &serde_json::to_value(config.eval_config()).expect("json")]);
    let eval = digest(&[&json!(sample)]);
    StageKeys {
        data,
        train,
        sample,
        eval,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub report: EvalReport,
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const REPORT_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.json";

fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!(".{stage}.key"))
}

fn is_fresh(dir: &Path, stage: &str, key: &str, outputs: &[&str]) -> bool {
    outputs.iter().all(|f| dir.join(f).is_file())
        && fs::read_to_string(stamp_path(dir, stage)).is_ok_and(|s| s.trim() == key)
}

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::new(stage, FailureKind::Io, e)
}

fn mark(dir: &Path, stage: &'static str, key: &str) -> Result<(), PipelineError> {
    fs::write(stamp_path(dir, stage), format!("{key}\n")).map_err(io_err(stage))
}

/// Writes the kept samples of a fresh dataset.
pub fn stage_data(config: &RunConfig, case: &NetworkCase, jobs: usize) -> Result<(), PipelineError> {
    let ds = generate_dataset(
        case,
        config.dataset.attempts,
        config.target_scale,
        config.seed(streams::DATA),
        &CpfOptions::default(),
        jobs,
    )
    .map_err(|e| PipelineError::new("gen-data", FailureKind::Numerical, e))?;
    let f = fs::File::create(config.out_dir.join(DATASET_FILE)).map_err(io_err("gen-data"))?;
    let mut w = BufWriter::new(f);
    write_jsonl(&mut w, &ds.samples).map_err(io_err("gen-data"))?;
    w.flush().map_err(io_err("gen-data"))
}

pub fn load_dataset(path: &Path) -> Result<Vec<crate::dataset::ContingencySample>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err("train"))?;
    read_jsonl(BufReader::new(f)).map_err(|e| PipelineError::new("train", FailureKind::Input, e))
}

/// Trains a model on `samples` and returns its checkpoint and loss history.
pub fn train_model(
    config: &RunConfig,
    case: &NetworkCase,
    samples: &[crate::dataset::ContingencySample],
    mut progress: impl FnMut(usize, f64),
) -> Result<(Checkpoint, Vec<f64>), PipelineError> {
    let normalizer = Normalizer::fit(samples);
    let encoder = GridEncoder::new(case, normalizer.clone());
    let pairs: Vec<TrainingPair> = samples.iter().map(|s| TrainingPair::new(&encoder.encode(s))).collect();
    let unet = config.model.unet(case.n_buses());
    let init = DenoiserParams::<f32>::init(&unet, config.seed(streams::INIT))
        .map_err(|e| PipelineError::new("train", FailureKind::Input, e))?;
    let tc = config.train_config();
    let out = train(&pairs, &tc, init, |e, l| progress(e, l)).map_err(|e| {
        let kind = match e {
            crate::diffusion::DiffusionError::NonFiniteLoss { .. } => FailureKind::Numerical,
            _ => FailureKind::Input,
        };
        PipelineError::new("train", kind, e)
    })?;
    let ck = Checkpoint {
        case: case.name.clone(),
        n: case.n_buses(),
        params: out.params,
        schedule: ScheduleParams {
            t_max: tc.t_max,
            beta_start: tc.beta_start,
            beta_end: tc.beta_end,
        },
        normalizer,
    };
    Ok((ck, out.loss_history))
}

/// One generated image per evaluation base state, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub index: usize,
    pub base_seed: u64,
    pub n: usize,
    pub data: Vec<f64>,
}

/// Samples the model once per evaluation base state.
pub fn generate_samples(
    ck: &Checkpoint,
    case: &NetworkCase,
    eval: &crate::eval::EvalConfig,
    chunk: usize,
    jobs: usize,
) -> Result<Vec<GeneratedSample>, PipelineError> {
    if ck.n != case.n_buses() {
        return Err(PipelineError::new(
            "sample",
            FailureKind::Input,
            format!("checkpoint is for {} buses, case has {}", ck.n, case.n_buses()),
        ));
    }
    let sched = ck
        .noise_schedule()
        .map_err(|e| PipelineError::new("sample", FailureKind::Input, e))?;
    let encoder = GridEncoder::new(case, ck.normalizer.clone());
    let bases: Vec<(usize, u64, GridImage, ChaCha8Rng)> = (0..eval.n_eval_samples)
        .map(|i| {
            let (seed, perturbed, rng) = eval_base(case, eval.seed, i);
            let bp: Vec<f64> = perturbed.buses.iter().map(|b| b.pd).collect();
            let bq: Vec<f64> = perturbed.buses.iter().map(|b| b.qd).collect();
            (i, seed, encoder.encode_base(&bp, &bq), rng)
        })
        .collect();
    let run = || -> Vec<GeneratedSample> {
        bases
            .par_chunks(chunk.max(1))
            .flat_map_iter(|part| {
                let conds: Vec<GridImage> = part.iter().map(|b| b.2.clone()).collect();
                let mut rngs: Vec<ChaCha8Rng> = part.iter().map(|b| b.3.clone()).collect();
                let imgs = sample_batch(&ck.params, &sched, &conds, &mut rngs, SampleOptions::default());
                part.iter()
                    .zip(imgs)
                    .map(|(b, img)| GeneratedSample {
                        index: b.0,
                        base_seed: b.1,
                        n: img.n,
                        data: img.data,
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    Ok(pool.install(run))
}

pub fn write_samples(path: &Path, samples: &[GeneratedSample]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_samples(path: &Path) -> Result<Vec<GeneratedSample>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err("eval"))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(io_err("eval"))?;
            serde_json::from_str(&l).map_err(|e| PipelineError::new("eval", FailureKind::Input, e))
        })
        .collect()
}

/// Scores generated samples against per-base-state oracle tables.
pub fn score_samples(
    ck: &Checkpoint,
    case: &NetworkCase,
    eval: &crate::eval::EvalConfig,
    samples: &[GeneratedSample],
    jobs: usize,
) -> EvalReport {
    let encoder = GridEncoder::new(case, ck.normalizer.clone());
    let cache = OracleCache::default();
    let opts = CpfOptions::default();
    let run = || -> Vec<crate::eval::EvalRow> {
        samples
            .par_iter()
            .map(|s| {
                let (seed, perturbed, _) = eval_base(case, eval.seed, s.index);
                let img = GridImage {
                    n: s.n,
                    data: s.data.clone(),
                };
                score_sample(&encoder, &perturbed, &img, seed, eval.target_scale, &opts, &cache)
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    EvalReport::from_rows(pool.install(run))
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Data,
    Train,
    Sample,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Data, Stage::Train, Stage::Sample, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "gen-data",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &[DATASET_FILE],
            Stage::Train => &[MODEL_FILE, LOSS_FILE],
            Stage::Sample => &[SAMPLES_FILE],
            Stage::Eval => &[REPORT_FILE, SUMMARY_FILE],
        }
    }

    fn key(self, keys: &StageKeys) -> &str {
        match self {
            Stage::Data => &keys.data,
            Stage::Train => &keys.train,
            Stage::Sample => &keys.sample,
            Stage::Eval => &keys.eval,
        }
    }
}

/// Config echoed into reports, with every default materialized.
pub fn config_echo(config: &RunConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("json")
}

fn require(dir: &Path, file: &str, stage: &'static str, producer: Stage) -> Result<PathBuf, PipelineError> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::new(
            stage,
            FailureKind::Input,
            format!("{} not found; run `{}` first", path.display(), producer.name()),
        ))
    }
}

fn load_checkpoint(dir: &Path, stage: &'static str) -> Result<Checkpoint, PipelineError> {
    let path = require(dir, MODEL_FILE, stage, Stage::Train)?;
    Checkpoint::load(&path).map_err(|e| PipelineError::new(stage, FailureKind::Input, e))
}

/// Runs one stage unconditionally from the artifacts already in
/// `config.out_dir` and records its key. Returns the report for
/// [`Stage::Eval`].
pub fn run_stage(
    config: &RunConfig,
    case: &NetworkCase,
    stage: Stage,
    jobs: usize,
    log: &mut dyn FnMut(&str),
) -> Result<Option<EvalReport>, PipelineError> {
    let dir = config.out_dir.as_path();
    fs::create_dir_all(dir).map_err(io_err("setup"))?;
    let keys = stage_keys(config, case);
    let mut report = None;
    match stage {
        Stage::Data => stage_data(config, case, jobs)?,
        Stage::Train => {
            let samples = load_dataset(&require(dir, DATASET_FILE, "train", Stage::Data)?)?;
            let epochs = config.training.epochs;
            let (ck, history) = train_model(config, case, &samples, |e, l| {
                if (e + 1) % 100 == 0 || e + 1 == epochs {
                    log(&format!("train: epoch {}/{} loss {l:.6}", e + 1, epochs));
                }
            })?;
            ck.save(&dir.join(MODEL_FILE))
                .map_err(|e| PipelineError::new("train", FailureKind::Io, e))?;
            fs::write(dir.join(LOSS_FILE), loss_history_csv(&history)).map_err(io_err("train"))?;
        }
        Stage::Sample => {
            let ck = load_checkpoint(dir, "sample")?;
            let samples = generate_samples(&ck, case, &config.eval_config(), config.eval.chunk, jobs)?;
            write_samples(&dir.join(SAMPLES_FILE), &samples).map_err(io_err("sample"))?;
        }
        Stage::Eval => {
            let ck = load_checkpoint(dir, "eval")?;
            let samples = read_samples(&require(dir, SAMPLES_FILE, "eval", Stage::Sample)?)?;
            let r = score_samples(&ck, case, &config.eval_config(), &samples, jobs);
            emit_report(&r, &config_echo(config), dir).map_err(|e| PipelineError::new("eval", FailureKind::Io, e))?;
            fs::write(dir.join(REPORT_FILE), serde_json::to_string(&r).expect("json")).map_err(io_err("eval"))?;
            report = Some(r);
        }
    }
    mark(dir, stage.name(), stage.key(&keys))?;
    Ok(report)
}

/// Runs every stage whose inputs changed since the last run in
/// `config.out_dir`. `log` receives one line per stage event.
pub fn run_pipeline(
    config: &RunConfig,
    jobs: usize,
    mut log: impl FnMut(&str),
) -> Result<PipelineOutcome, PipelineError> {
    let case = load_case(&config.case)?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err("setup"))?;
    let keys = stage_keys(config, &case);
    let mut stages = Vec::new();
    let mut upstream_ran = false;
    let mut report = None;
    for stage in Stage::ALL {
        if upstream_ran || !is_fresh(&dir, stage.name(), stage.key(&keys), stage.outputs()) {
            log(&format!("{}: running", stage.name()));
            report = run_stage(config, &case, stage, jobs, &mut log)?;
            stages.push((stage.name(), StageStatus::Ran));
            upstream_ran = true;
        } else {
            log(&format!("{}: up to date", stage.name()));
            stages.push((stage.name(), StageStatus::Skipped));
        }
    }
    let report = match report {
        Some(r) => r,
        None => {
            let text = fs::read_to_string(dir.join(REPORT_FILE)).map_err(io_err("eval"))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::new("eval", FailureKind::Input, e))?
        }
    };
    Ok(PipelineOutcome { stages, report })
}
