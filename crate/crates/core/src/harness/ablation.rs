//! Multi-mode, multi-seed ablation with per-run artifacts and an aggregated
//! results table.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::trace::emit_trace_summary;
use super::train::{
    distill_student, predict_samples, teacher_logits, train_student_ce, train_teacher, InputKind, TrainConfig,
    TrainLog,
};
use crate::distill::{write_trace_csv, DistillConfig, WeightRule, WeightTrace};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{evaluate_dataset, EvalOptions, MetricReport};
use crate::nets::{NetConfig, Network};
use crate::par::{self, Execution};
use crate::synthdata::{gen_dataset, splitmix64, Dataset, EvalSplit, Sample};

/// One training configuration of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// The stage-1 teacher itself.
    TeacherCe,
    StudentCeRgb,
    StudentCeRgbd,
    Fixed(f64),
    Dynamic,
    DynamicThreshold,
}

impl Mode {
    pub fn rule(self) -> Option<WeightRule> {
        match self {
            Mode::Fixed(s) => Some(WeightRule::Fixed(s)),
            Mode::Dynamic => Some(WeightRule::Dynamic),
            Mode::DynamicThreshold => Some(WeightRule::DynamicGated),
            _ => None,
        }
    }

    pub fn needs_teacher(self) -> bool {
        self == Mode::TeacherCe || self.rule().is_some()
    }

    /// Directory-safe spelling.
    pub fn dir_name(self) -> String {
        match self {
            Mode::Fixed(s) => format!("fixed_{s}"),
            Mode::DynamicThreshold => "dynamic_threshold".into(),
            m => m.to_string(),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::TeacherCe => f.write_str("teacher"),
            Mode::StudentCeRgb => f.write_str("rgb"),
            Mode::StudentCeRgbd => f.write_str("rgbd"),
            Mode::Fixed(s) => write!(f, "fixed:{s}"),
            Mode::Dynamic => f.write_str("dynamic"),
            Mode::DynamicThreshold => f.write_str("dynamic+threshold"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s {
            "teacher" | "teacher_ce" => Mode::TeacherCe,
            "rgb" | "student_ce_rgb" => Mode::StudentCeRgb,
            "rgbd" | "student_ce_rgbd" => Mode::StudentCeRgbd,
            "dynamic" => Mode::Dynamic,
            "dynamic+threshold" | "dynamic_threshold" => Mode::DynamicThreshold,
            _ => {
                let w = s
                    .strip_prefix("fixed:")
                    .or_else(|| s.strip_prefix("fixed_"))
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Config(format!("fixed weight {w} outside [0, 1]")));
                }
                Mode::Fixed(w)
            }
        };
        Ok(mode)
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A fresh synthetic dataset per seed.
    Generate { n: usize, noise_fraction: f64, size: usize },
    /// One dataset directory shared by all seeds.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSizes {
    pub teacher_base_channels: usize,
    pub student_base_channels: usize,
    pub depth_levels: usize,
}

impl DataSource {
    /// The dataset a run with `seed` trains on. Directories ignore the seed.
    pub fn load(&self, seed: u64, exec: Execution) -> Result<Dataset> {
        match self {
            DataSource::Generate { n, noise_fraction, size } => gen_dataset(*n, *noise_fraction, seed, *size, exec),
            DataSource::Dir(root) => Dataset::load(root),
        }
    }
}

impl Default for NetSizes {
    fn default() -> Self {
        Self {
            teacher_base_channels: crate::nets::TEACHER_BASE_CHANNELS,
            student_base_channels: crate::nets::STUDENT_BASE_CHANNELS,
            depth_levels: crate::nets::DEFAULT_DEPTH_LEVELS,
        }
    }
}

impl NetSizes {
    pub fn teacher(&self, seed: u64) -> NetConfig {
        NetConfig {
            base_channels: self.teacher_base_channels,
            depth_levels: self.depth_levels,
            ..NetConfig::teacher(seed)
        }
    }

    pub fn student(&self, seed: u64, input: InputKind) -> NetConfig {
        NetConfig {
            base_channels: self.student_base_channels,
            depth_levels: self.depth_levels,
            ..NetConfig::student(seed)
        }
        .with_input_channels(input.channels())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub nets: NetSizes,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub distill: DistillConfig,
    pub eval_splits: Vec<EvalSplit>,
    pub eval: EvalOptions,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            modes: vec![
                Mode::StudentCeRgbd,
                Mode::Fixed(0.3),
                Mode::Fixed(0.5),
                Mode::Fixed(0.7),
                Mode::Dynamic,
                Mode::DynamicThreshold,
            ],
            seeds: vec![1, 2, 3],
            data: DataSource::Generate {
                n: 250,
                noise_fraction: 0.3,
                size: 64,
            },
            nets: NetSizes::default(),
            teacher: TrainConfig::desk_teacher(),
            student: TrainConfig::desk(),
            distill: DistillConfig::default(),
            eval_splits: vec![EvalSplit::Test],
            eval: EvalOptions::default(),
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() || self.eval_splits.is_empty() {
            return Err(Error::Config("ablation needs at least one mode, seed and evaluation split".into()));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: Mode,
    pub dataset: String,
    pub seed: u64,
    pub mae: f64,
    pub max_f: f64,
    pub mean_f: f64,
    pub wf: f64,
    pub s: f64,
    pub e: f64,
    /// Training plus evaluation time; kept out of the CSV so that reruns
    /// reproduce it byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
}

impl ResultRow {
    fn new(mode: Mode, split: EvalSplit, seed: u64, r: &MetricReport, wall_time: f64) -> Self {
        Self {
            mode,
            dataset: split.name().to_string(),
            seed,
            mae: r.mae,
            max_f: r.max_f,
            mean_f: r.mean_f,
            wf: r.weighted_f,
            s: r.s_measure,
            e: r.e_measure,
            wall_time,
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Everything produced by one `(mode, seed)` run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub network: Network,
    pub log: TrainLog,
    pub trace: Vec<WeightTrace>,
    pub reports: Vec<(EvalSplit, MetricReport)>,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Serialize)]
struct RunMetrics<'a> {
    mode: Mode,
    seed: u64,
    wall_time: f64,
    epoch_losses: &'a [f64],
    reports: HashMap<&'static str, &'a MetricReport>,
}

/// Stable per-role seeds derived from the run seed. Standalone training
/// commands use the same derivation, so they reproduce ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub teacher_init: u64,
    pub teacher_order: u64,
    pub student_init: u64,
    pub student_order: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Self {
            teacher_init: splitmix64(&mut s),
            teacher_order: splitmix64(&mut s),
            student_init: splitmix64(&mut s),
            student_order: splitmix64(&mut s),
        }
    }
}

/// Metric reports of `net` on each requested split of `data`.
pub fn evaluate_network(
    net: &Network,
    data: &Dataset,
    splits: &[EvalSplit],
    opts: &EvalOptions,
    exec: Execution,
) -> Result<Vec<(EvalSplit, MetricReport)>> {
    splits
        .iter()
        .map(|&split| {
            let samples = data.eval_split(split);
            let preds = predict_samples(net, &samples, exec)?;
            let gts: Vec<_> = samples.iter().map(|s| s.gt.clone()).collect();
            Ok((split, evaluate_dataset(&preds, &gts, opts, exec)?))
        })
        .collect()
}

fn save_run(dir: &Path, out: &RunOutcome, wall_time: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.network.save(dir, "checkpoint")?;
    if !out.trace.is_empty() {
        write_trace_csv(&dir.join("trace.csv"), &out.trace)?;
        emit_trace_summary(&out.trace, dir)?;
    }
    let metrics = RunMetrics {
        mode: out.mode,
        seed: out.seed,
        wall_time,
        epoch_losses: &out.log.epoch_losses,
        reports: out.reports.iter().map(|(s, r)| (s.name(), r)).collect(),
    };
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_results_csv(&dir.join("results.csv"), &out.rows)
}


/// Trains and evaluates one student mode against a prepared dataset.
fn run_student(
    spec: &AblationSpec,
    mode: Mode,
    seed: u64,
    data: &Dataset,
    train: &[&Sample],
    cached: Option<&[Grid]>,
) -> Result<RunOutcome> {
    let seeds = RunSeeds::new(seed);
    let input = if mode == Mode::StudentCeRgb { InputKind::Rgb } else { InputKind::Rgbd };
    let net_cfg = spec.nets.student(seeds.student_init, input);
    let (network, log, trace) = match (mode.rule(), cached) {
        (Some(rule), Some(logits)) => {
            distill_student(net_cfg, train, logits, &spec.student, &spec.distill, rule, seeds.student_order)?
        }
        (None, _) => {
            let (n, l) = train_student_ce(net_cfg, train, &spec.student, seeds.student_order)?;
            (n, l, Vec::new())
        }
        (Some(_), None) => return Err(Error::Config(format!("mode {mode} needs a teacher"))),
    };
    let reports = evaluate_network(&network, data, &spec.eval_splits, &spec.eval, Execution::Sequential)?;
    Ok(RunOutcome {
        mode,
        seed,
        network,
        log,
        trace,
        reports,
        rows: Vec::new(),
    })
}

/// Runs every `(mode, seed)` pair. Modes of one seed share the dataset and
/// the stage-1 teacher. Rows come out ordered by seed, then by the order of
/// `spec.modes`, then by evaluation split.
///
/// Rows finished before an error are still written to `results.csv`.
pub fn run_ablation(spec: &AblationSpec, outdir: &Path, exec: Execution) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut outcomes: Vec<RunOutcome> = Vec::new();
    let result = (|| -> Result<()> {
        for &seed in &spec.seeds {
            let data = spec.data.load(seed, exec)?;
            let train = data.train();
            let seeds = RunSeeds::new(seed);
            let mut teacher: Option<(Network, TrainLog, f64)> = None;
            let mut cached = None;
            if spec.modes.iter().any(|m| m.needs_teacher()) {
                let start = Instant::now();
                let (net, log) = train_teacher(spec.nets.teacher(seeds.teacher_init), &train, &spec.teacher, seeds.teacher_order)?;
                let dir = outdir.join("teacher").join(seed.to_string());
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                net.save(&dir, "checkpoint")?;
                cached = Some(teacher_logits(&net, &train, exec)?);
                teacher = Some((net, log, start.elapsed().as_secs_f64()));
            }

            let student_modes: Vec<Mode> = spec.modes.iter().copied().filter(|&m| m != Mode::TeacherCe).collect();
            let runs = par::map(exec, &student_modes, |&mode| {
                let start = Instant::now();
                run_student(spec, mode, seed, &data, &train, cached.as_deref())
                    .map(|o| (o, start.elapsed().as_secs_f64()))
            });
            let mut by_mode: HashMap<String, (RunOutcome, f64)> = HashMap::new();
            let mut first_err = None;
            for (mode, r) in student_modes.iter().zip(runs) {
                match r {
                    Ok(v) => {
                        by_mode.insert(mode.to_string(), v);
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }

            for &mode in &spec.modes {
                let (mut out, wall) = if mode == Mode::TeacherCe {
                    let (net, log, t) = teacher.clone().expect("teacher trained when requested");
                    let start = Instant::now();
                    let reports = evaluate_network(&net, &data, &spec.eval_splits, &spec.eval, exec)?;
                    let out = RunOutcome {
                        mode,
                        seed,
                        network: net,
                        log,
                        trace: Vec::new(),
                        reports,
                        rows: Vec::new(),
                    };
                    (out, t + start.elapsed().as_secs_f64())
                } else {
                    match by_mode.remove(&mode.to_string()) {
                        Some(v) => v,
                        None => continue,
                    }
                };
                out.rows = out
                    .reports
                    .iter()
                    .map(|(split, r)| ResultRow::new(mode, *split, seed, r, wall))
                    .collect();
                save_run(&outdir.join(mode.dir_name()).join(seed.to_string()), &out, wall)?;
                outcomes.push(out);
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Ok(())
    })();
    let rows: Vec<ResultRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    write_results_csv(&outdir.join("results.csv"), &rows)?;
    write_timings(&outdir.join("timings.csv"), &rows)?;
    result.map(|_| outcomes)
}

fn write_timings(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "dataset", "seed", "wall_time"])?;
    for r in rows {
        w.write_record([r.mode.to_string(), r.dataset.clone(), r.seed.to_string(), format!("{:.3}", r.wall_time)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Median of `wf` over seeds for each `(mode, dataset)`.
pub fn median_by_mode(rows: &[ResultRow], dataset: &str, mode: Mode, field: fn(&ResultRow) -> f64) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.dataset == dataset && r.mode == mode)
        .map(field)
        .collect();
    median(&mut v)
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
