use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};
use umtn::collocation::{CollocationStepper, DirichletBoundary};
use umtn::datagen::{generate_dataset, ConvDiffConfig};
use umtn::dataset::{Split, SplitCounts};
use umtn::evaluation::{evaluate_model, persistence_baseline, EvalReport};
use umtn::interpolation::{loocv_select_kernel, LoocvReport, SiteSet};
use umtn::io::{
    ingest_csv_files, load_checkpoint, load_dataset, save_checkpoint, save_dataset, DatasetMeta, IngestOptions,
    LoadedDataset, ModelSpec,
};
use umtn::kernels::{LinearOperatorSpec, RadialKernel};
use umtn::model::{DrcModel, UmtnModel};
use umtn::training::{normalize, train_loop};
use umtn::{Error, Result};

use crate::config::{self, EvalConfig, ExportConfig, InitialCondition, SolveConfig, TrainJob, TuneConfig};
use crate::Common;

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create_file(path)?, value)?;
    Ok(())
}

fn print_summary(value: serde_json::Value) {
    println!("{value}");
}

fn parse_split(text: &str) -> Result<SplitCounts> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("split `{text}` is not three comma-separated counts")))?;
    match parts.as_slice() {
        [a, b, c] => Ok(SplitCounts::new(*a, *b, *c)),
        _ => Err(Error::Config(format!("split `{text}` is not three comma-separated counts"))),
    }
}

/// Loads a dataset and normalizes it with its training statistics if needed.
fn load_normalized(path: &Path) -> Result<LoadedDataset> {
    let mut loaded = load_dataset(path)?;
    if !loaded.dataset.is_normalized() {
        loaded.dataset = normalize(&loaded.dataset)?;
    }
    Ok(loaded)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Sites table (`site_id,coord_1,...`); switches to CSV ingestion.
    #[arg(long, requires = "sequences_csv")]
    sites_csv: Option<PathBuf>,
    /// Observation table (`sequence_id,time_index,site_id,value`).
    #[arg(long, requires = "sites_csv")]
    sequences_csv: Option<PathBuf>,
    /// Train, validation and test counts for ingested data, e.g. `70,15,15`.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 5)]
    tau: usize,
    #[arg(long, default_value_t = 15)]
    horizon: usize,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let start = Instant::now();
    let mut meta = DatasetMeta {
        tau: Some(args.tau),
        horizon: Some(args.horizon),
        ..DatasetMeta::default()
    };
    let dataset = match (&args.sites_csv, &args.sequences_csv) {
        (Some(sites), Some(sequences)) => {
            let split = args
                .split
                .as_deref()
                .ok_or_else(|| Error::Config("--split is required when ingesting CSV tables".into()))?;
            let options = IngestOptions {
                tau: args.tau,
                horizon: args.horizon,
                split: parse_split(split)?,
            };
            ingest_csv_files(sites, sequences, &options)?
        }
        _ => {
            let mut cfg: ConvDiffConfig = config::load(args.common.config.as_deref())?;
            if let Some(seed) = args.common.seed {
                cfg.seed = seed;
            }
            if let Some(split) = &args.split {
                cfg.split = parse_split(split)?;
            }
            cfg.validate()?;
            ensure_window(args.tau, args.horizon, cfg.sequence_length())?;
            meta.seeds.insert("data".into(), cfg.seed);
            generate_dataset(&cfg)?
        }
    };
    let manifest = save_dataset(&args.common.out, &dataset, &meta)?;
    print_summary(serde_json::json!({
        "out": args.common.out,
        "n_sequences": manifest.n_sequences,
        "sequence_length": manifest.sequence_length,
        "n_sites": manifest.n_sites,
        "dim": manifest.dim,
        "split": manifest.split,
        "seconds": start.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn ensure_window(tau: usize, horizon: usize, len: usize) -> Result<()> {
    if tau == 0 || horizon == 0 || tau + horizon > len {
        return Err(Error::Config(format!(
            "tau = {tau} and horizon = {horizon} do not fit sequences of length {len}"
        )));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TuneKernelArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Also write the per-candidate scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn tune_kernel(args: TuneKernelArgs) -> Result<()> {
    let mut cfg: TuneConfig = config::load(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let loaded = load_normalized(&args.data)?;
    let report = loocv_select_kernel(&cfg.candidates, &loaded.dataset, cfg.seed)?;
    write_json(&args.common.out, &report)?;
    if let Some(path) = &args.csv {
        report.write_csv(create_file(path)?)?;
    }
    print_summary(serde_json::json!({ "best": report.best, "best_index": report.best_index }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    common: Common,
}

fn grid_sites(cfg: &SolveConfig) -> Result<(SiteSet, Vec<usize>)> {
    let dim = cfg.lower.len();
    if dim == 0 || cfg.upper.len() != dim {
        return Err(Error::Config("lower and upper bounds must have the same positive length".into()));
    }
    if cfg.points_per_axis < 2 {
        return Err(Error::Config("points_per_axis must be at least 2".into()));
    }
    let m = cfg.points_per_axis;
    let total = m.pow(dim as u32);
    let mut points = Vec::with_capacity(total);
    let mut boundary = Vec::new();
    for idx in 0..total {
        let mut rest = idx;
        let mut p = Vec::with_capacity(dim);
        let mut on_edge = false;
        for k in 0..dim {
            let i = rest % m;
            rest /= m;
            on_edge |= i == 0 || i == m - 1;
            p.push(cfg.lower[k] + (cfg.upper[k] - cfg.lower[k]) * i as f64 / (m - 1) as f64);
        }
        if on_edge {
            boundary.push(idx);
        }
        points.push(p);
    }
    Ok((SiteSet::new(points)?, boundary))
}

fn initial_value(cfg: &SolveConfig, x: &[f64]) -> Result<f64> {
    match &cfg.initial {
        InitialCondition::SineProduct { frequencies } => {
            if frequencies.len() != x.len() {
                return Err(Error::Config("one frequency per dimension is required".into()));
            }
            Ok(x.iter()
                .zip(frequencies)
                .zip(&cfg.lower)
                .map(|((xi, w), lo)| (w * (xi - lo)).sin())
                .product())
        }
        InitialCondition::Gaussian { center, width } => {
            if center.len() != x.len() || *width <= 0.0 {
                return Err(Error::Config("gaussian needs a center per dimension and a positive width".into()));
            }
            let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((-r2 / (width * width)).exp())
        }
    }
}

pub fn solve(args: SolveArgs) -> Result<()> {
    let cfg: SolveConfig = config::load(args.common.config.as_deref())?;
    let (sites, boundary) = grid_sites(&cfg)?;
    let dim = sites.dim();
    let mut op = LinearOperatorSpec::diffusion(dim, cfg.diffusion);
    if let Some(v) = cfg.convection.clone() {
        if v.len() != dim {
            return Err(Error::Config("convection velocity must have one entry per dimension".into()));
        }
        op = op.with_convection(Arc::new(move |_| v.clone()));
    }
    let bc = cfg.dirichlet.then(|| DirichletBoundary::zero(boundary.clone()));
    let initial = (0..sites.len())
        .map(|i| initial_value(&cfg, sites.point(i)))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let stepper = CollocationStepper::new(cfg.kernel, &sites, &op, cfg.dt, bc)?;
    let trajectory = stepper.solve_ivp(&initial, cfg.t_end)?;
    trajectory.write_csv(create_file(&args.common.out)?)?;

    let last = trajectory.last().expect("at least one step");
    let mut summary = serde_json::json!({
        "out": args.common.out,
        "n_sites": sites.len(),
        "steps": trajectory.points.len() - 1,
        "t_end": last.time,
        "condition": stepper.system().condition(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    if let (InitialCondition::SineProduct { frequencies }, None) = (&cfg.initial, &cfg.convection) {
        let decay = (-cfg.diffusion * frequencies.iter().map(|w| w * w).sum::<f64>() * last.time).exp();
        let err = (0..sites.len())
            .map(|i| (last.values[i] - decay * initial[i]).abs())
            .fold(0.0, f64::max);
        summary["separable_reference_max_error"] = serde_json::json!(err);
    }
    print_summary(summary);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Kernel-selection report from `tune-kernel`, or a bare kernel object.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// History CSV; defaults to `history.csv` inside the checkpoint directory.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn read_kernel(path: &Path) -> Result<RadialKernel> {
    let text = fs::read_to_string(path)?;
    if let Ok(report) = serde_json::from_str::<LoocvReport>(&text) {
        return Ok(report.best);
    }
    serde_json::from_str::<RadialKernel>(&text)
        .map_err(|e| Error::Config(format!("{} is neither a kernel report nor a kernel: {e}", path.display())))
}

fn resolve_kernel(job: &TrainJob, file: Option<&Path>, loaded: &LoadedDataset) -> Result<RadialKernel> {
    if let Some(k) = job.kernel {
        return Ok(k);
    }
    if let Some(path) = file {
        return read_kernel(path);
    }
    loaded.manifest.meta.kernel.ok_or_else(|| {
        Error::Config("no kernel given: set `kernel` in the config, pass --kernel, or run tune-kernel".into())
    })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut job: TrainJob = config::load(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        job.train.seed = seed;
    }
    job.train.validate()?;
    let loaded = load_normalized(&args.data)?;
    let kernel = resolve_kernel(&job, args.kernel.as_deref(), &loaded)?;
    let dataset = &loaded.dataset;
    let start = Instant::now();
    let history = match &job.model {
        ModelSpec::Umtn(cfg) => {
            let mut model = UmtnModel::new(cfg.clone(), kernel, dataset.sites(), job.train.seed)?;
            let h = train_loop(&mut model, dataset, &job.train)?;
            save_checkpoint(&args.common.out, &model, &job.model, dataset.stats())?;
            h
        }
        ModelSpec::Drc(cfg) => {
            let mut model = DrcModel::new(cfg.clone(), kernel, dataset.sites(), job.train.seed)?;
            let h = train_loop(&mut model, dataset, &job.train)?;
            save_checkpoint(&args.common.out, &model, &job.model, dataset.stats())?;
            h
        }
    };
    let history_path = args.history.unwrap_or_else(|| args.common.out.join("history.csv"));
    history.write_csv(create_file(&history_path)?)?;
    print_summary(serde_json::json!({
        "out": args.common.out,
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_mae": history.best_val_mae,
        "stopped_early": history.stopped_early,
        "kernel": kernel,
        "seconds": start.elapsed().as_secs_f64(),
    }));
    Ok(())
}

/// What `eval` writes to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: Split,
    pub model: EvalReport,
    pub persistence: EvalReport,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Dataset normalized consistently with the checkpoint.
fn matched_data(data: &Path, checkpoint_stats: umtn::dataset::NormStats) -> Result<LoadedDataset> {
    let loaded = load_normalized(data)?;
    let stats = loaded.dataset.stats();
    if stats.mean.to_bits() != checkpoint_stats.mean.to_bits()
        || stats.variance.to_bits() != checkpoint_stats.variance.to_bits()
    {
        return Err(Error::Data(
            "dataset normalization statistics differ from those the checkpoint was trained with".into(),
        ));
    }
    Ok(loaded)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg: EvalConfig = config::load(args.common.config.as_deref())?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let loaded = matched_data(&args.data, checkpoint.manifest.stats)?;
    let model = checkpoint.model.forecaster();
    let dataset = &loaded.dataset;
    let output = EvalOutput {
        split: cfg.split,
        model: evaluate_model(model, dataset, cfg.split, cfg.tau, cfg.horizon)?,
        persistence: persistence_baseline(dataset, cfg.split, cfg.tau, cfg.horizon)?,
    };
    let out = &args.common.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &output)?;
    output.model.write_per_step_csv(create_file(&out.join("per_step.csv"))?)?;
    output.model.write_per_site_csv(create_file(&out.join("per_site.csv"))?, dataset)?;
    print_summary(serde_json::json!({
        "model": output.model.model,
        "mae": output.model.mae_mean,
        "persistence_mae": output.persistence.mae_mean,
        "n_sequences": output.model.n_sequences,
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence index within the dataset.
    #[arg(long, default_value_t = 0)]
    sequence: usize,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let cfg: EvalConfig = config::load(args.common.config.as_deref())?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let loaded = matched_data(&args.data, checkpoint.manifest.stats)?;
    let dataset = &loaded.dataset;
    if args.sequence >= dataset.n_sequences() {
        return Err(Error::Config(format!(
            "sequence {} out of range (dataset has {})",
            args.sequence,
            dataset.n_sequences()
        )));
    }
    ensure_window(cfg.tau, cfg.horizon, dataset.seq_len())?;
    let model = checkpoint.model.forecaster();
    model.geometry().check_sites(dataset.sites())?;
    let observed = dataset.batch_frames(&[args.sequence], cfg.tau)?;
    let forecast = model.forecast(&observed, cfg.horizon)?;
    let stats = dataset.stats();

    let mut w = csv::Writer::from_writer(create_file(&args.common.out)?);
    w.write_record(["step", "time_index", "site_index", "prediction", "truth"])
        .map_err(Error::from)?;
    for (step, frame) in forecast.iter().enumerate() {
        let t = cfg.tau + step;
        let truth = dataset.frame(args.sequence, t);
        for i in 0..dataset.n_sites() {
            w.write_record([
                step.to_string(),
                t.to_string(),
                i.to_string(),
                stats.denormalize(frame[(i, 0)]).to_string(),
                stats.denormalize(truth[i]).to_string(),
            ])
            .map_err(Error::from)?;
        }
    }
    w.flush()?;
    print_summary(serde_json::json!({
        "out": args.common.out,
        "sequence": args.sequence,
        "horizon": cfg.horizon,
        "n_sites": dataset.n_sites(),
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportReportArgs {
    #[command(flatten)]
    common: Common,
    /// `report.json` files written by `eval` (or bare evaluation reports).
    #[arg(long = "report", required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    model: String,
    runs: usize,
    mae_mean: f64,
    mae_std: Option<f64>,
    per_step: Vec<f64>,
}

fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    if let Ok(out) = serde_json::from_str::<EvalOutput>(&text) {
        return Ok(vec![out.model, out.persistence]);
    }
    serde_json::from_str::<EvalReport>(&text)
        .map(|r| vec![r])
        .map_err(|e| Error::Data(format!("{} is not an evaluation report: {e}", path.display())))
}

/// Pools run MAEs per model name; per-step curves are averaged over runs.
fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.model.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(name, rs)| {
            let runs: Vec<f64> = rs.iter().flat_map(|r| r.per_run.iter().copied()).collect();
            let k = runs.len() as f64;
            let mean = runs.iter().sum::<f64>() / k;
            let std = (runs.len() > 1)
                .then(|| (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
            let steps = rs.iter().map(|r| r.per_step.len()).min().unwrap_or(0);
            let per_step = (0..steps)
                .map(|t| rs.iter().map(|r| r.per_step[t]).sum::<f64>() / rs.len() as f64)
                .collect();
            SummaryRow {
                model: name.to_string(),
                runs: runs.len(),
                mae_mean: mean,
                mae_std: std,
                per_step,
            }
        })
        .collect()
}

fn markdown(title: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("# {title}\n\n| model | runs | MAE | std |\n|---|---:|---:|---:|\n");
    for r in rows {
        let std = r.mae_std.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        s.push_str(&format!("| {} | {} | {:.4} | {} |\n", r.model, r.runs, r.mae_mean, std));
    }
    let steps = rows.iter().map(|r| r.per_step.len()).min().unwrap_or(0);
    if steps > 0 {
        s.push_str("\n| step |");
        for r in rows {
            s.push_str(&format!(" {} |", r.model));
        }
        s.push_str("\n|---:|");
        s.push_str(&"---:|".repeat(rows.len()));
        s.push('\n');
        for t in 0..steps {
            s.push_str(&format!("| {} |", t + 1));
            for r in rows {
                s.push_str(&format!(" {:.4} |", r.per_step[t]));
            }
            s.push('\n');
        }
    }
    s
}

pub fn export_report(args: ExportReportArgs) -> Result<()> {
    let cfg: ExportConfig = config::load(args.common.config.as_deref())?;
    let mut reports = Vec::new();
    for path in &args.reports {
        reports.extend(read_reports(path)?);
    }
    let rows = summarize(&reports);
    let out = &args.common.out;
    if out.extension().is_some_and(|e| e == "json") {
        write_json(out, &rows)?;
    } else {
        let title = cfg.title.as_deref().unwrap_or("Forecast error summary");
        fs::write(out, markdown(title, &rows)).map_err(Error::from)?;
    }
    print_summary(serde_json::json!({ "out": out, "models": rows.len() }));
    Ok(())
}
