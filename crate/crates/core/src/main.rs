//! `vanguard` command-line front end.
//!
//! Results go to stdout, logs to stderr. Exit status: 0 on success, 1 on an
//! operational error, 2 on a usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use vanguard_core::benchmark::{
    ablation_sweep, evaluate, format_report, format_sweep_table, write_sweep_csv, EvalRecord, SweepGrid, TrialSpec,
};
use vanguard_core::estimator::DEFAULT_L_REF;
use vanguard_core::ingest::{
    read_detection_file, read_dota_file, read_gsd_meta_file, to_canonical_string, write_detection_json, DotaOptions,
    ImageMeta, DEFAULT_CATEGORY,
};
use vanguard_core::measurement::AreaMeasurement;
use vanguard_core::{
    calibrate_lref, estimate_gsd, Aggregation, CalibrationOptions, CalibrationRecord, DetectionSet, EstimatorConfig,
    EstimatorPath, ToolContext, ToolResponse,
};

#[derive(Debug, Parser)]
#[command(name = "vanguard", version, about = "Ground sample distance from vehicle detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Derive the reference vehicle length from annotated images.
    Calibrate(CalibrateArgs),
    /// Estimate GSD for one detection file, or every `.json` in a directory.
    Estimate(EstimateArgs),
    /// Score predictions against ground-truth GSD metadata.
    Evaluate(EvaluateArgs),
    /// Convert a mask pixel count to square metres.
    Area(AreaArgs),
    /// Run the ablation sweep over seeded synthetic scenes.
    Sweep(SweepArgs),
    /// Serve the tool API over HTTP.
    Serve(ServeArgs),
    /// Write seeded synthetic scenes to disk.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct CalibrationArg {
    /// Calibration JSON written by `calibrate`. Without one the built-in
    /// reference length is used.
    #[arg(long, env = "VANGUARD_CALIBRATION")]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of DOTA `.txt` annotation files.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory of `<image_id>.txt` files holding a `gsd:` line. Defaults
    /// to the `gsd:` header inside each annotation file.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_CATEGORY)]
    category: String,
    /// Skip objects above this difficulty level.
    #[arg(long)]
    max_difficulty: Option<u32>,
    /// Apply the per-image outlier cut before pooling.
    #[arg(long)]
    outlier_factor: Option<f64>,
    /// Also write the calibration to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    min_conf: Option<f64>,
    /// Outlier factor applied to the median pixel length.
    #[arg(long, conflicts_with = "no_outlier_cut")]
    alpha: Option<f64>,
    #[arg(long)]
    no_outlier_cut: bool,
    #[arg(long)]
    fallback_n: Option<usize>,
    #[arg(long)]
    weighted_kde: bool,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Kde,
    Median,
    Mean,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Kde => Aggregation::Kde,
            AggregationArg::Median => Aggregation::Median,
            AggregationArg::Mean => Aggregation::Mean,
        }
    }
}

impl Overrides {
    fn apply(&self, mut cfg: EstimatorConfig) -> Result<EstimatorConfig> {
        if let Some(m) = self.min_conf {
            if !(0.0..=1.0).contains(&m) {
                bail!("--min-conf must lie in [0, 1]");
            }
            cfg.min_conf = m;
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                bail!("--alpha must be positive");
            }
            cfg.alpha = Some(a);
        }
        if self.no_outlier_cut {
            cfg.alpha = None;
        }
        if let Some(n) = self.fallback_n {
            if n == 0 {
                bail!("--fallback-n must be at least 1");
            }
            cfg.fallback_n = n;
        }
        cfg.weighted_kde |= self.weighted_kde;
        if let Some(a) = self.aggregation {
            cfg.aggregation = a.into();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Detection JSON file, or a directory of them (one output line each).
    #[arg(long)]
    detections: PathBuf,
    #[command(flatten)]
    calibration: CalibrationArg,
    /// Also convert this mask pixel count to an area.
    #[arg(long)]
    pixel_count: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Newline-delimited JSON predictions, e.g. the output of `estimate`.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of `<image_id>.txt` files holding a `gsd:` line.
    #[arg(long)]
    gt: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Write per-image records to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AreaArgs {
    /// Mask pixel count.
    #[arg(long)]
    pixels: u64,
    /// Known GSD in m/px.
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    gsd: Option<f64>,
    /// Estimate the GSD from these detections instead.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[command(flatten)]
    calibration: CalibrationArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference length used by the estimator; defaults to the synthetic
    /// fleet's modal length.
    #[arg(long)]
    l_ref: Option<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[command(flatten)]
    calibration: CalibrationArg,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory; receives `detections/`, `labelTxt/` and `meta/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            tracing::error!("{}", error_chain(&err));
            ExitCode::from(1)
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn error_chain(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Estimate(a) => estimate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Area(a) => area(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Gen(a) => gen(a),
    }
}

fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn load_calibration(arg: &CalibrationArg) -> Result<CalibrationRecord> {
    match &arg.calibration {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading calibration {}", path.display()))?;
            let record = CalibrationRecord::from_json(&text)
                .with_context(|| format!("parsing calibration {}", path.display()))?;
            tracing::info!(l_ref = record.l_ref, path = %path.display(), "loaded calibration");
            Ok(record)
        }
        None => {
            tracing::info!(
                l_ref = DEFAULT_L_REF,
                "no calibration given, using built-in reference length"
            );
            Ok(CalibrationRecord {
                l_ref: DEFAULT_L_REF,
                n_instances: 1,
                bandwidth: 0.0,
            })
        }
    }
}

/// Files in `dir` with the given extension, sorted by name.
fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let opts = DotaOptions {
        category: a.category.clone(),
        max_difficulty: a.max_difficulty,
        ..DotaOptions::default()
    };
    let mut annotated = Vec::new();
    let mut skipped = 0usize;
    for path in files_with_extension(&a.annotations, "txt")? {
        let ann = read_dota_file(&path, &opts)?;
        skipped += ann.skipped_lines;
        let meta = match &a.meta {
            Some(dir) => {
                let meta_path = dir.join(format!("{}.txt", ann.set.image_id));
                if meta_path.is_file() {
                    read_gsd_meta_file(&meta_path)?
                } else {
                    ImageMeta {
                        image_id: ann.set.image_id.clone(),
                        gsd_gt: None,
                    }
                }
            }
            None => ImageMeta {
                image_id: ann.set.image_id.clone(),
                gsd_gt: ann.gsd_header,
            },
        };
        if meta.gsd_gt.is_none() {
            tracing::debug!(image = %meta.image_id, "no usable gsd, skipped");
        }
        annotated.push((ann.set, meta));
    }
    if skipped > 0 {
        tracing::warn!(skipped, "annotation lines skipped");
    }
    let with_gsd = annotated.iter().filter(|(_, m)| m.gsd_gt.is_some()).count();
    tracing::info!(images = annotated.len(), with_gsd, "calibrating");

    let result = calibrate_lref(
        &annotated,
        &CalibrationOptions {
            outlier_factor: a.outlier_factor,
            ..CalibrationOptions::default()
        },
    )?;
    let json = result.to_json();
    if let Some(out) = &a.out {
        fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    emit(&json)
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let ctx = ToolContext::new(load_calibration(&a.calibration)?);
    let cfg = a.overrides.apply(ctx.base_config())?;
    let inputs = if a.detections.is_dir() {
        files_with_extension(&a.detections, "json")?
    } else {
        vec![a.detections.clone()]
    };
    let mut out = String::new();
    for path in inputs {
        let set = read_detection_file(&path).with_context(|| format!("reading detections {}", path.display()))?;
        let est = estimate_gsd(&set, &cfg);
        let mut response = ToolResponse::from_estimate(set.image_id.clone(), &est);
        if let (Some(count), Some(gsd)) = (a.pixel_count, est.gsd_pred) {
            response.area = Some(AreaMeasurement::new(count, gsd, response.confidence)?);
        }
        out.push_str(&response.to_json());
    }
    emit(&out)
}

/// The subset of a prediction line that evaluation needs. Accepts both
/// tool responses and bare records.
#[derive(Debug, Deserialize)]
struct PredictionLine {
    image_id: String,
    gsd_pred: Option<f64>,
    confidence: f64,
    path: EstimatorPath,
    #[serde(default)]
    n_filtered: Option<usize>,
    #[serde(default)]
    diagnostics: Option<PredictionDiagnostics>,
}

#[derive(Debug, Deserialize)]
struct PredictionDiagnostics {
    n_filtered: usize,
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let mut records = Vec::new();
    let mut missing_gt = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(line).with_context(|| format!("{}:{}", a.pred.display(), i + 1))?;
        let meta_path = a.gt.join(format!("{}.txt", p.image_id));
        let gsd_gt = if meta_path.is_file() {
            read_gsd_meta_file(&meta_path)?.gsd_gt
        } else {
            None
        };
        let Some(gsd_gt) = gsd_gt else {
            missing_gt += 1;
            continue;
        };
        let rel_error = p.gsd_pred.map(|g| (g - gsd_gt).abs() / gsd_gt);
        records.push(EvalRecord {
            n_filtered: p.n_filtered.or(p.diagnostics.map(|d| d.n_filtered)).unwrap_or(0),
            image_id: p.image_id,
            gsd_pred: p.gsd_pred,
            gsd_gt,
            rel_error,
            confidence: p.confidence,
            path: p.path,
        });
    }
    if missing_gt > 0 {
        tracing::warn!(missing_gt, "predictions without ground truth were skipped");
    }
    let report = evaluate(&records)?;

    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for r in &records {
            w.serialize(CsvRecord::from(r))?;
        }
        w.flush()?;
    }
    if a.json {
        emit(&to_canonical_string(&serde_json::to_value(&report)?))
    } else {
        emit(&format_report(&report))
    }
}

#[derive(serde::Serialize)]
struct CsvRecord<'a> {
    image_id: &'a str,
    gsd_pred: Option<f64>,
    gsd_gt: f64,
    rel_error: Option<f64>,
    confidence: f64,
    path: &'static str,
    n_filtered: usize,
}

impl<'a> From<&'a EvalRecord> for CsvRecord<'a> {
    fn from(r: &'a EvalRecord) -> Self {
        Self {
            image_id: &r.image_id,
            gsd_pred: r.gsd_pred,
            gsd_gt: r.gsd_gt,
            rel_error: r.rel_error,
            confidence: r.confidence,
            path: r.path.as_str(),
            n_filtered: r.n_filtered,
        }
    }
}

fn area(a: AreaArgs) -> Result<()> {
    let (gsd, confidence) = match (a.gsd, &a.detections) {
        (Some(g), _) => (g, 1.0),
        (None, Some(path)) => {
            let ctx = ToolContext::new(load_calibration(&a.calibration)?);
            let set = read_detection_file(path).with_context(|| format!("reading detections {}", path.display()))?;
            let est = estimate_gsd(&set, &ctx.base_config());
            let Some(gsd) = est.gsd_pred else {
                bail!("no usable detections in {}; cannot estimate GSD", path.display());
            };
            (gsd, est.confidence.c_final)
        }
        (None, None) => bail!("either --gsd or --detections is required"),
    };
    let m = AreaMeasurement::new(a.pixels, gsd, confidence)?;
    emit(&to_canonical_string(&serde_json::to_value(m)?))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let spec = TrialSpec {
        n_trials: a.trials,
        ..TrialSpec::standard(a.seed)
    };
    let dataset = spec.dataset();
    let base = EstimatorConfig::with_l_ref(a.l_ref.unwrap_or(spec.l_ref_truth));
    let grid = SweepGrid::standard(base);
    tracing::info!(trials = a.trials, seed = a.seed, "running sweep");
    let cells = ablation_sweep(&dataset, &grid);
    if let Some(path) = &a.csv {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_sweep_csv(&cells, file)?;
    }
    if a.json {
        emit(&to_canonical_string(&serde_json::to_value(&cells)?))
    } else {
        emit(&format_sweep_table(&cells))
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let ctx = ToolContext::new(load_calibration(&a.calibration)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(vanguard_core::server::serve(a.bind, ctx))?;
    Ok(())
}

fn dota_lines(set: &DetectionSet, gsd: f64) -> String {
    let mut s = format!("imagesource:synthetic\ngsd:{gsd}\n");
    for d in &set.detections {
        for p in d.polygon.corners() {
            s.push_str(&format!("{} {} ", p.x, p.y));
        }
        s.push_str(&format!("{} 0\n", d.label));
    }
    s
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = TrialSpec {
        n_trials: a.trials,
        ..TrialSpec::standard(a.seed)
    };
    let dirs: BTreeMap<&str, PathBuf> = ["detections", "labelTxt", "meta"]
        .into_iter()
        .map(|d| (d, a.out.join(d)))
        .collect();
    for dir in dirs.values() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for (set, meta) in spec.dataset() {
        let gsd = meta.gsd_gt.context("synthetic scene without ground truth")?;
        let id = &set.image_id;
        fs::write(
            dirs["detections"].join(format!("{id}.json")),
            write_detection_json(&set),
        )?;
        fs::write(dirs["labelTxt"].join(format!("{id}.txt")), dota_lines(&set, gsd))?;
        fs::write(dirs["meta"].join(format!("{id}.txt")), format!("gsd:{gsd}\n"))?;
    }
    emit(&format!("wrote {} scenes to {}\n", spec.n_trials, a.out.display()))
}
