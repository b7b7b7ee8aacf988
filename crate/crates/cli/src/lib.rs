//! Command implementations behind the `advshift` binary.
//!
//! Exit codes: 0 on success, 1 for bad input (arguments, config, unreadable
//! or malformed files), 2 when a computation fails.

pub mod grid;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use advshift::config::{parse_value, KvFile};
use advshift::data::{gaussian_mixture_dataset, load_csv, resample_label_distribution, save_csv, SynthConfig};
use advshift::diagnostics::{estimate_assumption_constants, moreau_stationarity, ConstantProbe};
use advshift::evaluator::{load_distribution_csv, per_class_errors, per_class_losses, shift_sweep};
use advshift::projection::{projection_benchmark, BenchReport};
use advshift::trainer::{train_with_checkpoints, TheorySchedule, TrainConfig, TrainHistory};
use advshift::{Dataset, LabelDistribution, ModelParams};
use clap::{Args, Parser, Subcommand, ValueEnum};

use grid::{parse_taus, Axis, Job, MethodSpec, SweepSpec};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<advshift::Error> for CliError {
    fn from(e: advshift::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "advshift", version, about = "Robust training against adversarial label shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes model.ckpt and history.csv.
    Train(TrainArgs),
    /// Worst-case error curve of a checkpoint; writes profile.csv and curve.csv.
    Eval(EvalArgs),
    /// Grid of training + evaluation jobs from a sweep spec file.
    Sweep(SweepArgs),
    /// Vary one hyperparameter of a base config.
    Ablate(AblateArgs),
    /// Time KL-ball projection against the closed-form update.
    ProjectBench(BenchArgs),
    /// Stationarity trace and assumption-constant estimates for one run.
    Diag(DiagArgs),
    /// Write a synthetic Gaussian-mixture dataset.
    Generate(GenerateArgs),
    /// Resample a dataset to a target label distribution.
    Resample(ResampleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Error,
    Loss,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0,0.5,1,2,3")]
    pub taus: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "error")]
    pub metric: Metric,
    /// Loss clip for `--metric loss`.
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Base training config shared by every job.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation data; defaults to the training data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub spec: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Config key to vary, e.g. clip or epsilon.
    #[arg(long)]
    pub param: String,
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long, default_value = "0,0.5,1,2")]
    pub taus: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for report.txt, stationarity.csv and history.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stationarity is measured every this many epochs.
    #[arg(long, default_value_t = 1)]
    pub every: usize,
    #[arg(long, default_value_t = 1.0)]
    pub l_hat: f64,
    /// Minibatches sampled per checkpoint for the constant estimates.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    /// Replace the step sizes with the rates from the convergence analysis.
    #[arg(long)]
    pub theory_schedule: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Ten classes, noise and rarity increasing with the class index.
    Heterogeneous,
    /// Balanced classes with equal noise.
    Uniform,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "heterogeneous")]
    pub preset: Preset,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `class_id,prob` CSV, e.g. a witness written by `eval`.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::ProjectBench(a) => cmd_project_bench(&a),
        Command::Diag(a) => cmd_diag(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Resample(a) => cmd_resample(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn load_train_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut kv = KvFile::load(path)?;
    if let Some(s) = seed {
        kv.insert("seed", &s.to_string());
    }
    Ok(TrainConfig::from_kv(&kv)?)
}

/// `epoch,mean_loss,kl_pi_pemp,min_pi,loss_0..loss_{L-1},pi_0..pi_{L-1}`.
pub fn write_history(history: &TrainHistory, path: &Path) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let l = history.records.first().map_or(0, |r| r.pi.len());
    let mut header: Vec<String> =
        ["epoch", "mean_loss", "kl_pi_pemp", "min_pi"].iter().map(|s| s.to_string()).collect();
    header.extend((0..l).map(|k| format!("loss_{k}")));
    header.extend((0..l).map(|k| format!("pi_{k}")));
    w.write_record(&header).map_err(write_err(path))?;
    for r in &history.records {
        let mut row = vec![
            r.epoch.to_string(),
            format!("{:?}", r.mean_loss),
            format!("{:?}", r.kl_pi_pemp),
            format!("{:?}", r.min_pi),
        ];
        row.extend(r.class_losses.iter().map(|v| format!("{v:?}")));
        row.extend(r.pi.probs().iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_train_config(&a.config, a.seed)?;
    let data = load_csv(&a.data)?;
    create_dir(&a.out)?;
    let (checkpoints, history) = train_with_checkpoints(&cfg, &data)?;
    let params = match checkpoints.last() {
        Some(p) => p.clone(),
        None => {
            ModelParams::init(cfg.arch, data.dim(), data.num_classes(), advshift::rng::derive_seed(cfg.seed, "init", 0))
        }
    };
    params.save(a.out.join("model.ckpt"))?;
    write_history(&history, &a.out.join("history.csv"))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let taus = parse_taus(&a.taus)?;
    let params = ModelParams::load(&a.checkpoint)?;
    let data = load_csv(&a.data)?;
    let profile = match a.metric {
        Metric::Error => per_class_errors(&params, &data)?,
        Metric::Loss => per_class_losses(&params, &data, a.clip)?,
    };
    create_dir(&a.out)?;
    profile.save_csv(a.out.join("profile.csv"))?;
    shift_sweep(&profile, &taus)?.save_dir(&a.out)?;
    Ok(())
}

/// One aggregated result line.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub method: String,
    pub r: f64,
    pub clip: f64,
    pub eps: f64,
    pub seed: u64,
    pub tau: Option<f64>,
    pub worst_value: Option<f64>,
    pub min_pi: Option<f64>,
    pub status: String,
}

pub const GRID_HEADER: [&str; 9] = ["method", "r", "clip", "eps", "seed", "tau", "worst_value", "min_pi", "status"];

/// Runs with `min π` below this are marked `collapsed`.
pub const COLLAPSE_FLOOR: f64 = 1e-8;

fn run_job(job: &Job, base: &KvFile, train_set: &Dataset, val: &Dataset, taus: &[f64]) -> Vec<GridRow> {
    let kv = job.config(base);
    let row = |cfg: Option<&TrainConfig>, tau, worst_value, min_pi, status: String| {
        let adv = cfg.map(|c| c.adversary.clone()).unwrap_or_default();
        GridRow {
            method: job.method.overrides[0].1.clone(),
            r: adv.r,
            clip: adv.clip,
            eps: adv.epsilon,
            seed: job.seed,
            tau,
            worst_value,
            min_pi,
            status,
        }
    };
    let cfg = match TrainConfig::from_kv(&kv) {
        Ok(c) => c,
        Err(e) => return vec![row(None, None, None, None, format!("failed: {e}"))],
    };
    let outcome = train_with_checkpoints(&cfg, train_set).and_then(|(ckpts, history)| {
        let params = ckpts.last().cloned().ok_or_else(|| advshift::Error::Config("epochs must be positive".into()))?;
        let profile = per_class_errors(&params, val)?;
        Ok((shift_sweep(&profile, taus)?, history.min_pi()))
    });
    match outcome {
        Ok((curve, min_pi)) => {
            let status = if min_pi < COLLAPSE_FLOOR { "collapsed" } else { "ok" };
            curve
                .points
                .iter()
                .map(|p| row(Some(&cfg), Some(p.tau), Some(p.value), Some(min_pi), status.to_string()))
                .collect()
        }
        Err(e) => vec![row(Some(&cfg), None, None, None, format!("failed: {e}"))],
    }
}

/// Runs `count` tasks on up to `threads` workers; results keep task order.
pub fn parallel_map<T: Send>(count: usize, threads: usize, task: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads.clamp(1, count.max(1)))
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= count {
                            break done;
                        }
                        done.push((i, task(i)));
                    }
                })
            })
            .collect();
        for w in workers {
            for (i, v) in w.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every task ran")).collect()
}

pub fn run_grid(spec: &SweepSpec, args: &GridArgs) -> CliResult<Vec<GridRow>> {
    let base = KvFile::load(&args.config)?;
    TrainConfig::from_kv(&base)?;
    let train_set = load_csv(&args.data)?;
    let val = match &args.val {
        Some(p) => load_csv(p)?,
        None => train_set.clone(),
    };
    let jobs = spec.jobs();
    let rows = parallel_map(jobs.len(), args.jobs, |i| run_job(&jobs[i], &base, &train_set, &val, &spec.taus));
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_grid(rows: &[GridRow], path: &Path) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(GRID_HEADER).map_err(write_err(path))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:?}", r.r),
            format!("{:?}", r.clip),
            format!("{:?}", r.eps),
            r.seed.to_string(),
            opt(r.tau),
            opt(r.worst_value),
            opt(r.min_pi),
            r.status.clone(),
        ])
        .map_err(write_err(path))?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn finish_grid(rows: Vec<GridRow>, path: &Path) -> CliResult<()> {
    write_grid(&rows, path)?;
    let failed = rows.iter().filter(|r| r.status.starts_with("failed")).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} job(s) failed; see the status column of {}", path.display())));
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let spec = SweepSpec::from_kv(&KvFile::load(&a.spec)?)?;
    let rows = run_grid(&spec, &a.grid)?;
    finish_grid(rows, &a.grid.out)
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    if !advshift::config::TRAIN_KEYS.contains(&a.param.as_str()) || matches!(a.param.as_str(), "method" | "seed") {
        return Err(CliError::Input(format!("cannot ablate `{}`", a.param)));
    }
    let base = KvFile::load(&a.grid.config)?;
    let method = base.get("method").unwrap_or("erm");
    let values: Vec<String> = a.values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(|v| v.is_empty()) {
        return Err(CliError::Input(format!("bad --values `{}`", a.values)));
    }
    let seeds = a.seeds.split(',').map(|s| parse_value::<u64>("seeds", s)).collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        methods: vec![MethodSpec::parse(method)?],
        axes: vec![Axis { key: a.param.clone(), values }],
        seeds,
        taus: parse_taus(&a.taus)?,
    };
    let rows = run_grid(&spec, &a.grid)?;
    finish_grid(rows, &a.grid.out)
}

pub fn cmd_project_bench(a: &BenchArgs) -> CliResult<()> {
    let report = projection_benchmark(a.classes, a.trials, a.seed)?;
    let mut w = csv_writer(&a.out)?;
    w.write_record(BenchReport::csv_header()).map_err(write_err(&a.out))?;
    w.write_record(report.csv_row()).map_err(write_err(&a.out))?;
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))
}

pub fn cmd_diag(a: &DiagArgs) -> CliResult<()> {
    if a.every == 0 {
        return Err(CliError::Input("--every must be positive".into()));
    }
    if !(a.l_hat > 0.0) {
        return Err(CliError::Input("--l-hat must be positive".into()));
    }
    let mut cfg = load_train_config(&a.config, a.seed)?;
    let data = load_csv(&a.data)?;
    if a.theory_schedule {
        let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
        TheorySchedule::for_steps(steps).apply(&mut cfg);
    }
    create_dir(&a.out)?;
    let (checkpoints, history) = train_with_checkpoints(&cfg, &data)?;
    let picked: Vec<usize> = (0..checkpoints.len()).filter(|i| (i + 1) % a.every == 0).collect();
    let estimates = parallel_map(picked.len(), a.jobs, |k| {
        moreau_stationarity(&checkpoints[picked[k]], &data, &cfg.adversary, a.l_hat)
    });
    let path = a.out.join("stationarity.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["epoch", "stationarity", "gap", "converged"]).map_err(write_err(&path))?;
    let mut trace = Vec::new();
    for (&i, est) in picked.iter().zip(estimates) {
        let est = est?;
        trace.push(est.value);
        w.write_record([
            (i + 1).to_string(),
            format!("{:?}", est.value),
            format!("{:?}", est.gap),
            est.converged.to_string(),
        ])
        .map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let probe = ConstantProbe {
        data: &data,
        checkpoints: &checkpoints,
        adversary: cfg.adversary.clone(),
        batch_size: cfg.batch_size,
        samples: a.samples,
        seed: cfg.seed,
        stationarity: trace,
    };
    let report = estimate_assumption_constants(&history, &probe)?;
    report.save(a.out.join("report.txt"))?;
    write_history(&history, &a.out.join("history.csv"))?;
    if !report.is_finite() {
        return Err(CliError::Runtime("non-finite diagnostic estimate".into()));
    }
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let synth = match a.preset {
        Preset::Heterogeneous => SynthConfig::heterogeneous_ten(a.n, a.seed),
        Preset::Uniform => SynthConfig::uniform(a.classes, a.dim, a.separation, a.noise, a.n, a.seed),
    };
    synth.validate()?;
    let data = gaussian_mixture_dataset(&synth)?;
    save_csv(&data, &a.out)?;
    Ok(())
}

pub fn cmd_resample(a: &ResampleArgs) -> CliResult<()> {
    let data = load_csv(&a.data)?;
    let target: LabelDistribution = load_distribution_csv(&a.target)?;
    let shifted = resample_label_distribution(&data, &target, a.n, a.seed)?;
    save_csv(&shifted, &a.out)?;
    Ok(())
}
