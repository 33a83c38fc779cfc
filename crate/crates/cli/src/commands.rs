use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context};
use dynkd::distill::{write_trace_csv, DistillConfig, WeightRule};
use dynkd::gradcheck::{check_dynamic_loss, check_network, FdReport};
use dynkd::harness::{
    distill_student, emit_trace_summary, evaluate_network, gated_noisy_fraction, median, predict_samples,
    run_ablation, teacher_logits, train_student_ce, train_teacher, AblationSpec, DataSource, InputKind, Mode,
    NetSizes, ResultRow, RunSeeds, TrainConfig,
};
use dynkd::metrics::{evaluate_dataset, EvalOptions, MetricReport, REPORT_CSV_HEADER};
use dynkd::nets::{NetKind, Network};
use dynkd::par::{self, Execution};
use dynkd::synthdata::{gen_dataset, read_pnm, write_pnm, Dataset, EvalSplit};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Command, Common, DataArgs, Failure, TrainArgs};

type Outcome = Result<(), Failure>;

const DEFAULT_N: usize = 250;
const DEFAULT_NOISE_FRACTION: f64 = 0.3;
const DEFAULT_SIZE: usize = 64;

fn default_source() -> DataSource {
    DataSource::Generate {
        n: DEFAULT_N,
        noise_fraction: DEFAULT_NOISE_FRACTION,
        size: DEFAULT_SIZE,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    n: usize,
    noise_fraction: f64,
    seed: u64,
    size: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            noise_fraction: DEFAULT_NOISE_FRACTION,
            seed: 0,
            size: DEFAULT_SIZE,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TeacherConfig {
    seed: u64,
    data: DataSource,
    nets: NetSizes,
    train: TrainConfig,
    eval_splits: Vec<EvalSplit>,
    eval: EvalOptions,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: default_source(),
            nets: NetSizes::default(),
            train: TrainConfig::desk_teacher(),
            eval_splits: vec![EvalSplit::Test],
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StudentConfig {
    seed: u64,
    data: DataSource,
    nets: NetSizes,
    mode: Mode,
    teacher: Option<PathBuf>,
    train: TrainConfig,
    distill: DistillConfig,
    eval_splits: Vec<EvalSplit>,
    eval: EvalOptions,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: default_source(),
            nets: NetSizes::default(),
            mode: Mode::DynamicThreshold,
            teacher: None,
            train: TrainConfig::desk(),
            distill: DistillConfig::default(),
            eval_splits: vec![EvalSplit::Test],
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    seed: u64,
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: DataSource,
    split: EvalSplit,
    eval: EvalOptions,
    /// Expected side length of every map, if set.
    size: Option<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pred: None,
            gt: None,
            checkpoint: None,
            data: default_source(),
            split: EvalSplit::Test,
            eval: EvalOptions::default(),
            size: None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TraceConfig {
    trace: PathBuf,
    seed: u64,
    data: Option<DataSource>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FdConfig {
    seed: u64,
    size: usize,
    repeats: usize,
    samples: usize,
    tolerance: f64,
    nets: NetSizes,
    distill: DistillConfig,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 16,
            repeats: 5,
            samples: 50,
            tolerance: 1e-3,
            nets: NetSizes::default(),
            distill: DistillConfig::default(),
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Records the command line and the resolved configuration.
fn write_invocation<T: Serialize>(out: &Path, command: &str, argv: &[String], config: &T, extra: serde_json::Value) -> anyhow::Result<()> {
    create_out(out)?;
    let record = serde_json::json!({
        "command": command,
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "runtime": extra,
    });
    write_json(&out.join("invocation.json"), &record)
}

/// Folds the data flags into a source. A directory replaces everything;
/// generation flags edit (or start) a generated source.
fn apply_data(src: &mut DataSource, d: &DataArgs, size: Option<usize>) {
    if let Some(dir) = &d.data {
        *src = DataSource::Dir(dir.clone());
        return;
    }
    if d.n.is_none() && d.noise_fraction.is_none() && size.is_none() {
        return;
    }
    let (n0, f0, s0) = match src {
        DataSource::Generate { n, noise_fraction, size } => (*n, *noise_fraction, *size),
        DataSource::Dir(_) => (DEFAULT_N, DEFAULT_NOISE_FRACTION, DEFAULT_SIZE),
    };
    *src = DataSource::Generate {
        n: d.n.unwrap_or(n0),
        noise_fraction: d.noise_fraction.unwrap_or(f0),
        size: size.unwrap_or(s0),
    };
}

fn apply_train(cfg: &mut TrainConfig, t: &TrainArgs) {
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.lr {
        cfg.optim.learning_rate = v;
    }
    if t.no_augment {
        cfg.augment = false;
    }
    cfg.verbose = !t.quiet;
}

/// Loads a dataset and checks it against an explicit `--size`.
fn load_data(src: &DataSource, seed: u64, size: Option<usize>) -> anyhow::Result<Dataset> {
    let data = src.load(seed, Execution::Sequential)?;
    if let Some(s) = size {
        ensure!(
            data.manifest.image_size == s,
            "dataset images are {0}x{0}, but --size {s} was given",
            data.manifest.image_size
        );
    }
    Ok(data)
}

fn print_reports(reports: &[(EvalSplit, MetricReport)]) {
    println!("{}", REPORT_CSV_HEADER.join(","));
    for (split, r) in reports {
        println!("{}", r.csv_row(split.name()).join(","));
    }
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    mode: String,
    seed: u64,
    epoch_losses: &'a [f64],
    reports: HashMap<&'static str, &'a MetricReport>,
}

fn write_train_metrics(out: &Path, mode: String, seed: u64, losses: &[f64], reports: &[(EvalSplit, MetricReport)]) -> anyhow::Result<()> {
    let m = TrainMetrics {
        mode,
        seed,
        epoch_losses: losses,
        reports: reports.iter().map(|(s, r)| (s.name(), r)).collect(),
    };
    write_json(&out.join("metrics.json"), &m)
}

pub fn run(command: Command, argv: &[String]) -> Outcome {
    let name = command.name();
    match command {
        Command::GenData {
            common,
            n,
            noise_fraction,
            jobs,
        } => gen_data(name, argv, common, n, noise_fraction, jobs),
        Command::TrainTeacher { common, data, train } => teacher(name, argv, common, data, train),
        Command::Distill {
            common,
            data,
            train,
            teacher,
            mode,
            p,
            threshold,
        } => distill(name, argv, common, data, train, teacher, mode, p, threshold),
        Command::Evaluate {
            common,
            pred,
            gt,
            checkpoint,
            data,
            split,
            save_preds,
        } => evaluate(name, argv, common, pred, gt, checkpoint, data, split, save_preds),
        Command::Ablate {
            common,
            data,
            train,
            modes,
            seeds,
            splits,
            jobs,
        } => ablate(name, argv, common, data, train, modes, seeds, splits, jobs),
        Command::TraceSummary { common, trace, data } => trace_summary(name, argv, common, trace, data),
        Command::FdCheck {
            common,
            repeats,
            samples,
            tolerance,
        } => fd_check(name, argv, common, repeats, samples, tolerance),
    }
}

fn gen_data(name: &str, argv: &[String], common: Common, n: Option<usize>, noise: Option<f64>, jobs: usize) -> Outcome {
    let mut cfg: GenDataConfig = load_config(common.config.as_deref())?;
    cfg.n = n.unwrap_or(cfg.n);
    cfg.noise_fraction = noise.unwrap_or(cfg.noise_fraction);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.size = common.size.unwrap_or(cfg.size);
    write_invocation(&common.out, name, argv, &cfg, serde_json::json!({ "jobs": jobs }))?;
    let data = par::with_jobs(jobs, |exec| gen_dataset(cfg.n, cfg.noise_fraction, cfg.seed, cfg.size, exec))?;
    data.write(&common.out)?;
    println!(
        "wrote {} samples ({} noisy; {} train / {} test) to {}",
        data.samples.len(),
        data.noisy_count(),
        data.manifest.split.train.len(),
        data.manifest.split.test.len(),
        common.out.display()
    );
    Ok(())
}

fn teacher(name: &str, argv: &[String], common: Common, data_args: DataArgs, train: TrainArgs) -> Outcome {
    let mut cfg: TeacherConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    apply_data(&mut cfg.data, &data_args, common.size);
    apply_train(&mut cfg.train, &train);
    write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;

    let data = load_data(&cfg.data, cfg.seed, common.size)?;
    let seeds = RunSeeds::new(cfg.seed);
    let (net, log) = train_teacher(cfg.nets.teacher(seeds.teacher_init), &data.train(), &cfg.train, seeds.teacher_order)?;
    net.save(&common.out, "checkpoint")?;
    let reports = evaluate_network(&net, &data, &cfg.eval_splits, &cfg.eval, Execution::Sequential)?;
    write_train_metrics(&common.out, Mode::TeacherCe.to_string(), cfg.seed, &log.epoch_losses, &reports)?;
    print_reports(&reports);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill(
    name: &str,
    argv: &[String],
    common: Common,
    data_args: DataArgs,
    train: TrainArgs,
    teacher: Option<PathBuf>,
    mode: Option<Mode>,
    p: Option<f64>,
    threshold: Option<f64>,
) -> Outcome {
    let mut cfg: StudentConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.mode = mode.unwrap_or(cfg.mode);
    cfg.teacher = teacher.or(cfg.teacher);
    cfg.distill.p = p.unwrap_or(cfg.distill.p);
    cfg.distill.threshold = threshold.unwrap_or(cfg.distill.threshold);
    apply_data(&mut cfg.data, &data_args, common.size);
    apply_train(&mut cfg.train, &train);
    if cfg.mode == Mode::TeacherCe {
        return Err(usage("mode `teacher` is trained by `train-teacher`"));
    }
    let rule = cfg.mode.rule();
    if rule.is_some() && cfg.teacher.is_none() {
        return Err(usage(format!("mode `{}` needs --teacher <checkpoint.json>", cfg.mode)));
    }
    write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;

    let data = load_data(&cfg.data, cfg.seed, common.size)?;
    let train_set = data.train();
    let seeds = RunSeeds::new(cfg.seed);
    let input = if cfg.mode == Mode::StudentCeRgb { InputKind::Rgb } else { InputKind::Rgbd };
    let net_cfg = cfg.nets.student(seeds.student_init, input);
    let (net, log, trace) = match (rule, &cfg.teacher) {
        (Some(rule), Some(path)) => {
            let teacher = Network::load(path)?;
            if teacher.kind() != NetKind::Teacher {
                eprintln!("warning: {} holds a {:?} network", path.display(), teacher.kind());
            }
            let logits = teacher_logits(&teacher, &train_set, Execution::Sequential)?;
            distill_student(net_cfg, &train_set, &logits, &cfg.train, &cfg.distill, rule, seeds.student_order)?
        }
        _ => {
            let (n, l) = train_student_ce(net_cfg, &train_set, &cfg.train, seeds.student_order)?;
            (n, l, Vec::new())
        }
    };
    net.save(&common.out, "checkpoint")?;
    if !trace.is_empty() {
        write_trace_csv(&common.out.join("trace.csv"), &trace)?;
        emit_trace_summary(&trace, &common.out)?;
        let modes = data.samples.iter().map(|s| (s.id.clone(), s.mode)).collect();
        let gated = trace.iter().filter(|t| t.gated).count();
        match gated_noisy_fraction(&trace, &modes) {
            Some(f) => println!("gated {gated}/{} trace entries, {:.1}% on noisy samples", trace.len(), 100.0 * f),
            None => println!("gated 0/{} trace entries", trace.len()),
        }
    }
    let reports = evaluate_network(&net, &data, &cfg.eval_splits, &cfg.eval, Execution::Sequential)?;
    write_train_metrics(&common.out, cfg.mode.to_string(), cfg.seed, &log.epoch_losses, &reports)?;
    print_reports(&reports);
    Ok(())
}

/// `(name, path)` of every PGM file directly inside `dir`, sorted by name.
fn pgm_files(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            let name = path.file_name().expect("file entry").to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    name: &str,
    argv: &[String],
    common: Common,
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data_args: DataArgs,
    split: Option<EvalSplit>,
    save_preds: bool,
) -> Outcome {
    let mut cfg: EvaluateConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.size = common.size.or(cfg.size);
    cfg.split = split.unwrap_or(cfg.split);
    if pred.is_some() {
        (cfg.pred, cfg.gt, cfg.checkpoint) = (pred, gt, None);
    } else if checkpoint.is_some() {
        (cfg.pred, cfg.gt, cfg.checkpoint) = (None, None, checkpoint);
    }
    apply_data(&mut cfg.data, &data_args, common.size);
    let (preds, gts, label) = match (&cfg.pred, &cfg.gt, &cfg.checkpoint) {
        (Some(p), Some(g), None) => {
            write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;
            let files = pgm_files(g)?;
            if files.is_empty() {
                return Err(Failure::Runtime(anyhow!("no .pgm masks in {}", g.display())));
            }
            let mut preds = Vec::with_capacity(files.len());
            let mut gts = Vec::with_capacity(files.len());
            for (file, path) in &files {
                let gt = read_pnm(path)?;
                let pr = read_pnm(&p.join(file)).with_context(|| format!("prediction for {file}"))?;
                if let Some(s) = cfg.size {
                    if gt.height() != s || gt.width() != s {
                        return Err(Failure::Runtime(anyhow!("{} is {}x{}, expected {s}x{s}", path.display(), gt.height(), gt.width())));
                    }
                }
                gts.push(gt);
                preds.push(pr);
            }
            (preds, gts, g.display().to_string())
        }
        (None, None, Some(ckpt)) => {
            write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;
            let net = Network::load(ckpt)?;
            let data = load_data(&cfg.data, cfg.seed, cfg.size)?;
            let samples = data.eval_split(cfg.split);
            let preds = predict_samples(&net, &samples, Execution::Sequential)?;
            if save_preds {
                let dir = common.out.join("preds");
                create_out(&dir)?;
                for (s, p) in samples.iter().zip(&preds) {
                    write_pnm(&dir.join(format!("{}.pgm", s.id)), p)?;
                }
            }
            (preds, samples.iter().map(|s| s.gt.clone()).collect(), cfg.split.name().to_string())
        }
        _ => return Err(usage("give either --pred and --gt, or --checkpoint")),
    };
    let report = evaluate_dataset(&preds, &gts, &cfg.eval, Execution::Sequential)?;
    report.write_json(&common.out.join("metrics.json"))?;
    println!("{}", REPORT_CSV_HEADER.join(","));
    println!("{}", report.csv_row(&label).join(","));
    Ok(())
}

#[derive(Serialize)]
struct MedianRow {
    mode: Mode,
    dataset: String,
    runs: usize,
    mae: f64,
    max_f: f64,
    mean_f: f64,
    wf: f64,
    s: f64,
    e: f64,
}

/// Per `(mode, dataset)` medians over seeds, in table order.
fn medians(spec: &AblationSpec, rows: &[ResultRow]) -> Vec<MedianRow> {
    let mut out = Vec::new();
    for split in &spec.eval_splits {
        for &mode in &spec.modes {
            let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.mode == mode && r.dataset == split.name()).collect();
            if sel.is_empty() {
                continue;
            }
            let med = |f: fn(&ResultRow) -> f64| median(&mut sel.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            out.push(MedianRow {
                mode,
                dataset: split.name().to_string(),
                runs: sel.len(),
                mae: med(|r| r.mae),
                max_f: med(|r| r.max_f),
                mean_f: med(|r| r.mean_f),
                wf: med(|r| r.wf),
                s: med(|r| r.s),
                e: med(|r| r.e),
            });
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    name: &str,
    argv: &[String],
    common: Common,
    data_args: DataArgs,
    train: TrainArgs,
    modes: Option<Vec<Mode>>,
    seeds: Option<Vec<u64>>,
    splits: Option<Vec<EvalSplit>>,
    jobs: usize,
) -> Outcome {
    let mut spec: AblationSpec = load_config(common.config.as_deref())?;
    if let Some(m) = modes {
        spec.modes = m;
    }
    if let Some(s) = seeds {
        spec.seeds = s;
    } else if let Some(s) = common.seed {
        spec.seeds = vec![s];
    }
    if let Some(s) = splits {
        spec.eval_splits = s;
    }
    apply_data(&mut spec.data, &data_args, common.size);
    apply_train(&mut spec.teacher, &train);
    apply_train(&mut spec.student, &train);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if let (DataSource::Dir(_), Some(_)) = (&spec.data, common.size) {
        return Err(usage("--size applies to generated data only"));
    }
    write_invocation(&common.out, name, argv, &spec, serde_json::json!({ "jobs": jobs }))?;

    let outcomes = par::with_jobs(jobs, |exec| run_ablation(&spec, &common.out, exec))?;
    let rows: Vec<ResultRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let table = medians(&spec, &rows);
    let path = common.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &table {
        w.serialize(r).context("summary row")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    println!("{:<20} {:<11} {:>4} {:>8} {:>8} {:>8}", "mode", "dataset", "runs", "wF", "MAE", "S");
    for r in &table {
        println!(
            "{:<20} {:<11} {:>4} {:>8.4} {:>8.4} {:>8.4}",
            r.mode.to_string(),
            r.dataset,
            r.runs,
            r.wf,
            r.mae,
            r.s
        );
    }
    println!("{} result rows in {}", rows.len(), common.out.join("results.csv").display());
    Ok(())
}

fn trace_summary(name: &str, argv: &[String], common: Common, trace: PathBuf, data_args: DataArgs) -> Outcome {
    let mut cfg: TraceConfig = load_config(common.config.as_deref())?;
    cfg.trace = trace;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    if data_args.data.is_some() || data_args.n.is_some() || data_args.noise_fraction.is_some() || common.size.is_some() {
        let mut src = cfg.data.take().unwrap_or_else(default_source);
        apply_data(&mut src, &data_args, common.size);
        cfg.data = Some(src);
    }
    write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;

    let trace = dynkd::distill::read_trace_csv(&cfg.trace)?;
    let summary = emit_trace_summary(&trace, &common.out)?;
    println!("{:>5} {:>9} {:>9} {:>9} {:>7}", "epoch", "theta", "min", "max", "gated");
    for e in &summary {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>7.3}",
            e.epoch, e.theta_mean, e.theta_min, e.theta_max, e.gated_fraction
        );
    }
    if let Some(src) = &cfg.data {
        let data = load_data(src, cfg.seed, None)?;
        let modes: HashMap<String, _> = data.samples.iter().map(|s| (s.id.clone(), s.mode)).collect();
        if let Some(t) = trace.iter().find(|t| !modes.contains_key(&t.sample_id)) {
            return Err(Failure::Runtime(anyhow!("trace sample {} is not in the dataset", t.sample_id)));
        }
        match gated_noisy_fraction(&trace, &modes) {
            Some(f) => println!("noisy share of gated entries: {f:.4}"),
            None => println!("no gated entries"),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FdEntry {
    check: &'static str,
    seed: u64,
    report: FdReport,
}

fn fd_check(
    name: &str,
    argv: &[String],
    common: Common,
    repeats: Option<usize>,
    samples: Option<usize>,
    tolerance: Option<f64>,
) -> Outcome {
    let mut cfg: FdConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.size = common.size.unwrap_or(cfg.size);
    cfg.repeats = repeats.unwrap_or(cfg.repeats);
    cfg.samples = samples.unwrap_or(cfg.samples);
    cfg.tolerance = tolerance.unwrap_or(cfg.tolerance);
    if cfg.repeats == 0 || cfg.samples == 0 {
        return Err(usage("--repeats and --samples must be positive"));
    }
    write_invocation(&common.out, name, argv, &cfg, serde_json::Value::Null)?;

    let mut entries = Vec::new();
    for seed in cfg.seed..cfg.seed + cfg.repeats as u64 {
        let student = cfg.nets.student(seed, InputKind::Rgbd);
        let teacher = cfg.nets.teacher(seed);
        entries.push(FdEntry {
            check: "student",
            seed,
            report: check_network(NetKind::Student, student.clone(), cfg.size, cfg.samples, seed)?,
        });
        entries.push(FdEntry {
            check: "teacher",
            seed,
            report: check_network(NetKind::Teacher, teacher, cfg.size, cfg.samples, seed)?,
        });
        let (report, _) = check_dynamic_loss(student, &cfg.distill, WeightRule::DynamicGated, cfg.size, cfg.samples, seed)?;
        entries.push(FdEntry {
            check: "dynamic_loss",
            seed,
            report,
        });
    }
    let worst = entries.iter().map(|e| e.report.max_relative_error).fold(0.0, f64::max);
    write_json(
        &common.out.join("fd_report.json"),
        &serde_json::json!({ "tolerance": cfg.tolerance, "max_relative_error": worst, "checks": entries }),
    )?;
    for e in &entries {
        println!(
            "{:<13} seed {:>3}: {} params, max relative error {:.3e}",
            e.check, e.seed, e.report.checked, e.report.max_relative_error
        );
    }
    if worst.is_nan() || worst >= cfg.tolerance {
        return Err(anyhow!("gradient check failed: max relative error {worst:.3e} >= {:.1e}", cfg.tolerance).into());
    }
    println!("ok: max relative error {worst:.3e} < {:.1e}", cfg.tolerance);
    Ok(())
}
