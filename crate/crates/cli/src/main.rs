mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use fluoro_recon::fgrn::{self, Architecture, FgrnModel, TrainConfig};
use fluoro_recon::pipeline::{self, FgrnPredictor, ReconstructConfig, TargetSource};
use fluoro_recon::skeleton::DistalRule;
use fluoro_recon::synth::{self, CurveConfig, Dataset, GuidewireSample, SynthConfig};
use fluoro_recon::{pgm, CameraRig, View};
use nalgebra::Vector2;
use serde::Serialize;

use config::FileConfig;

const THREADS_ENV: &str = "FLUORO_RECON_THREADS";

/// Guidewire shape reconstruction from orthogonal fluoroscopy masks.
///
/// Logs go to stderr (set RUST_LOG to change the level). Worker threads for
/// generate and eval can be capped with FLUORO_RECON_THREADS.
#[derive(Debug, Parser)]
#[command(name = "fluoro-recon", version)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset of mask pairs with ground-truth curves.
    Generate(GenerateArgs),
    /// Reconstruct a 3D curve from a top and a side mask.
    Reconstruct(ReconstructArgs),
    /// Train the single-view shape regressor on a dataset.
    Train(TrainArgs),
    /// Score triangulation and a trained model against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bodies per ground-truth curve.
    #[arg(long, default_value_t = 20)]
    bodies: usize,
    /// Body spacing in metres.
    #[arg(long, default_value_t = 0.002)]
    spacing: f64,
    /// Half-width of the cubic workspace centred on the origin, metres.
    #[arg(long, default_value_t = 0.06, value_name = "HALF")]
    workspace: f64,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Top-view mask (binary PGM).
    #[arg(long, value_name = "PGM")]
    top: PathBuf,
    /// Side-view mask (binary PGM).
    #[arg(long, value_name = "PGM")]
    side: PathBuf,
    /// Camera rig JSON, as written by `generate`.
    #[arg(long, value_name = "FILE")]
    cameras: PathBuf,
    /// Bodies in the output curve.
    #[arg(long, default_value_t = 20)]
    bodies: usize,
    /// Distal tip hint in the top view; without it the end away from the border is the tip.
    #[arg(long, value_name = "U,V", value_parser = parse_pixel)]
    tip_top: Option<Vector2<f64>>,
    /// Distal tip hint in the side view.
    #[arg(long, value_name = "U,V", value_parser = parse_pixel)]
    tip_side: Option<Vector2<f64>>,
    /// Spline smoothing factor (m^2); 0 interpolates.
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    /// Output curve CSV. Reprojections go to `<stem>_top_reprojection.csv` and `<stem>_side_reprojection.csv`.
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewArg {
    Top,
    Side,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Top => View::Top,
            ViewArg::Side => View::Side,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    /// Two-view reconstruction of each sample.
    Triangulated,
    /// The generator's ground-truth curve.
    GroundTruth,
}

impl From<TargetArg> for TargetSource {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Triangulated => TargetSource::Triangulated,
            TargetArg::GroundTruth => TargetSource::GroundTruth,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Which view the network sees.
    #[arg(long, value_enum, default_value_t = ViewArg::Top)]
    view: ViewArg,
    /// Source of the regression targets.
    #[arg(long, value_enum, default_value_t = TargetArg::Triangulated)]
    target: TargetArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Huber term weight.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Spacing regularizer weight.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed for initialization, split, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Fraction of examples held out for validation.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Output model file; a JSON descriptor is written to `<MODEL>.json`.
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
    /// Loss-history CSV [default: <MODEL>.history.csv].
    #[arg(long, value_name = "CSV")]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Dataset directory written by `generate`.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// View the model was trained on.
    #[arg(long, value_enum, default_value_t = ViewArg::Top)]
    view: ViewArg,
    /// Points used to correspond estimate and truth.
    #[arg(long, default_value_t = 20)]
    correspondence: usize,
    /// Report file: JSON when the name ends in `.json`, otherwise a text table.
    #[arg(long, value_name = "FILE")]
    out_report: PathBuf,
    /// Per-segment error profile CSV.
    #[arg(long, value_name = "CSV")]
    out_profile: PathBuf,
}

fn parse_pixel(s: &str) -> Result<Vector2<f64>, String> {
    let (u, v) = s.split_once(',').ok_or_else(|| format!("expected U,V, got {s:?}"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok(Vector2::new(num(u)?, num(v)?))
}

/// Resolves one setting: an explicit flag, then the config file, then the flag default.
struct Merge<'a>(&'a ArgMatches);

impl Merge<'_> {
    fn pick<T>(&self, id: &str, flag: T, file: Option<T>) -> T {
        match (self.0.value_source(id), file) {
            (Some(ValueSource::CommandLine), _) | (_, None) => flag,
            (_, Some(v)) => v,
        }
    }
}

fn log_config(command: &str, resolved: &impl Serialize) {
    let json = serde_json::to_string(resolved).expect("config serializes");
    log::info!("{command} config: {json}");
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("output: {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let dataset = Dataset::load(path).context("dataset")?;
    log::info!("loaded {} samples from {}", dataset.samples.len(), path.display());
    Ok(dataset)
}

#[derive(Serialize)]
struct GenerateRun<'a> {
    out: &'a Path,
    count: usize,
    seed: u64,
    generator: SynthConfig,
}

fn generate(args: &GenerateArgs, m: Merge, file: config::GenerateFile) -> anyhow::Result<()> {
    let defaults = SynthConfig::default();
    let half = m.0.value_source("workspace") == Some(ValueSource::CommandLine);
    let curve = CurveConfig {
        workspace_min: if half { [-args.workspace; 3] } else { file.workspace_min.unwrap_or([-args.workspace; 3]) },
        workspace_max: if half { [args.workspace; 3] } else { file.workspace_max.unwrap_or([args.workspace; 3]) },
        length_range: file.length_range.unwrap_or(defaults.curve.length_range),
        max_curvature: file.max_curvature.unwrap_or(defaults.curve.max_curvature),
        bodies: m.pick("bodies", args.bodies, file.bodies),
        spacing: m.pick("spacing", args.spacing, file.spacing),
    };
    let run = GenerateRun {
        out: &args.out,
        count: m.pick("count", args.count, file.count),
        seed: m.pick("seed", args.seed, file.seed),
        generator: SynthConfig {
            curve,
            stroke_radius_px: file.stroke_radius_px.unwrap_or(defaults.stroke_radius_px),
            frustum_margin_px: file.frustum_margin_px.unwrap_or(defaults.frustum_margin_px),
        },
    };
    log_config("generate", &run);
    let rig = CameraRig::default_orthogonal();
    let manifest = synth::generate_dataset(run.seed, run.count, &run.generator, &rig, run.out).context("generate")?;
    log::info!("wrote {} samples to {}", manifest.count, run.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReconstructRun<'a> {
    top: &'a Path,
    side: &'a Path,
    cameras: &'a Path,
    tip_top: Option<[f64; 2]>,
    tip_side: Option<[f64; 2]>,
    reconstruction: ReconstructConfig,
    out: &'a Path,
}

fn reprojection_path(out: &Path, view: View) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{}_reprojection.csv", view.name()))
}

fn reprojection_csv(detected: &[Vector2<f64>], reprojected: &[Vector2<f64>]) -> String {
    let mut s = String::from("index,u_detected_px,v_detected_px,u_reprojected_px,v_reprojected_px\n");
    for (i, (d, r)) in detected.iter().zip(reprojected).enumerate() {
        s += &format!("{i},{},{},{},{}\n", d.x, d.y, r.x, r.y);
    }
    s
}

fn reconstruct(args: &ReconstructArgs, m: Merge, file: config::ReconstructFile) -> anyhow::Result<()> {
    let run = ReconstructRun {
        top: &args.top,
        side: &args.side,
        cameras: &args.cameras,
        tip_top: args.tip_top.map(|p| [p.x, p.y]),
        tip_side: args.tip_side.map(|p| [p.x, p.y]),
        reconstruction: ReconstructConfig {
            bodies: m.pick("bodies", args.bodies, file.bodies),
            smoothing: m.pick("smoothing", args.smoothing, file.smoothing),
        },
        out: &args.out,
    };
    log_config("reconstruct", &run);
    let rig = CameraRig::load(run.cameras).with_context(|| format!("cameras: {}", run.cameras.display()))?;
    let top = pgm::read(run.top).with_context(|| format!("input: {}", run.top.display()))?;
    let side = pgm::read(run.side).with_context(|| format!("input: {}", run.side.display()))?;
    let rule = |hint: Option<Vector2<f64>>, view: View| hint.map_or_else(|| pipeline::border_rule(rig.camera(view)), DistalRule::NearestTo);
    let r = pipeline::reconstruct(
        &top,
        &side,
        &rig,
        rule(args.tip_top, View::Top),
        rule(args.tip_side, View::Side),
        &run.reconstruction,
    )?;
    let mut csv = Vec::new();
    r.curve.write_csv(&mut csv).context("output")?;
    write_file(run.out, &csv)?;
    write_file(&reprojection_path(run.out, View::Top), reprojection_csv(&r.top_points, &r.reprojected_top).as_bytes())?;
    write_file(&reprojection_path(run.out, View::Side), reprojection_csv(&r.side_points, &r.reprojected_side).as_bytes())?;
    log::info!("wrote {} bodies to {}", r.curve.len(), run.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainRun<'a> {
    dataset: &'a Path,
    view: View,
    target: TargetSource,
    bodies: usize,
    training: TrainConfig,
    out: &'a Path,
    history: PathBuf,
}

fn history_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn parse_enum<T: ValueEnum>(key: &str, value: Option<String>) -> anyhow::Result<Option<T>> {
    value.map(|v| T::from_str(&v, false).map_err(|e| anyhow!("config: {key} = {v:?}: {e}"))).transpose()
}

fn train(args: &TrainArgs, m: Merge, file: config::TrainFile) -> anyhow::Result<()> {
    let view: ViewArg = m.pick("view", args.view, parse_enum("train.view", file.view)?);
    let target: TargetArg = m.pick("target", args.target, parse_enum("train.target", file.target)?);
    let dataset = load_dataset(&args.dataset)?;
    let defaults = TrainConfig::default();
    let run = TrainRun {
        dataset: &args.dataset,
        view: view.into(),
        target: target.into(),
        bodies: dataset.manifest.bodies,
        training: TrainConfig {
            alpha: m.pick("alpha", args.alpha, file.alpha),
            beta: m.pick("beta", args.beta, file.beta),
            spacing: dataset.manifest.spacing_m * fluoro_recon::MM_PER_M,
            learning_rate: m.pick("lr", args.lr, file.lr),
            epochs: m.pick("epochs", args.epochs, file.epochs),
            batch_size: m.pick("batch_size", args.batch_size, file.batch_size),
            seed: m.pick("seed", args.seed, file.seed),
            dropout: m.pick("dropout", args.dropout, file.dropout),
            validation_fraction: m.pick("validation_fraction", args.validation_fraction, file.validation_fraction),
            ..defaults
        },
        out: &args.out,
        history: args.history.clone().unwrap_or_else(|| history_path(&args.out)),
    };
    log_config("train", &run);
    run.training.validate().context("config")?;
    let samples: Vec<&GuidewireSample> = dataset.samples.iter().collect();
    let recon = ReconstructConfig { bodies: run.bodies, ..ReconstructConfig::default() };
    let set = pipeline::training_set(&samples, run.view, run.target, &recon);
    for (id, reason) in &set.skipped {
        log::warn!("sample {id} skipped: {reason}");
    }
    let outcome = fgrn::train(&set.examples, &Architecture::fgrn(run.bodies), &run.training).context("training")?;
    outcome.model.save(run.out).with_context(|| format!("output: {}", run.out.display()))?;
    let mut history = Vec::new();
    fgrn::write_history_csv(&outcome.history, &mut history).context("output")?;
    write_file(&run.history, &history)?;
    log::info!("saved model to {}", run.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRun<'a> {
    model: &'a Path,
    dataset: &'a Path,
    view: View,
    correspondence: usize,
    reconstruction: ReconstructConfig,
    out_report: &'a Path,
    out_profile: &'a Path,
}

fn eval(args: &EvalArgs, m: Merge, file: config::EvalFile) -> anyhow::Result<()> {
    let view: ViewArg = m.pick("view", args.view, parse_enum("eval.view", file.view)?);
    let dataset = load_dataset(&args.dataset)?;
    let run = EvalRun {
        model: &args.model,
        dataset: &args.dataset,
        view: view.into(),
        correspondence: m.pick("correspondence", args.correspondence, file.correspondence),
        reconstruction: ReconstructConfig { bodies: dataset.manifest.bodies, ..ReconstructConfig::default() },
        out_report: &args.out_report,
        out_profile: &args.out_profile,
    };
    log_config("eval", &run);
    if run.correspondence < 2 {
        bail!("config: correspondence must be at least 2");
    }
    let model = FgrnModel::load(run.model).with_context(|| format!("model: {}", run.model.display()))?;
    if model.architecture().bodies() != run.reconstruction.bodies {
        bail!("model: predicts {} bodies, dataset has {}", model.architecture().bodies(), run.reconstruction.bodies);
    }
    let samples: Vec<&GuidewireSample> = dataset.samples.iter().collect();
    let predictor = FgrnPredictor { model: &model, view: run.view };
    let report = pipeline::evaluate(&samples, &run.reconstruction, Some(&predictor), run.correspondence);
    for row in report.per_sample.iter().filter(|r| r.error.is_some()) {
        log::warn!("sample {} ({}): {}", row.sample, row.method, row.error.as_deref().unwrap_or_default());
    }
    let table = report.table();
    let body = if run.out_report.extension().is_some_and(|e| e == "json") {
        let mut s = serde_json::to_string_pretty(&report).context("output")?;
        s.push('\n');
        s
    } else {
        table.clone()
    };
    write_file(run.out_report, body.as_bytes())?;
    let mut profile = Vec::new();
    report.write_profile_csv(&mut profile).context("output")?;
    write_file(run.out_profile, &profile)?;
    std::io::stdout().write_all(table.as_bytes()).context("output")?;
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    let Some(value) = std::env::var_os(THREADS_ENV) else { return Ok(()) };
    let value = value.to_string_lossy();
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("environment: {THREADS_ENV}={value:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("environment")?;
    Ok(())
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    configure_threads()?;
    let file = FileConfig::load(cli.config.as_deref())?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let m = Merge(sub);
    match &cli.command {
        Command::Generate(a) => generate(a, m, file.generate),
        Command::Reconstruct(a) => reconstruct(a, m, file.reconstruct),
        Command::Train(a) => train(a, m, file.train),
        Command::Eval(a) => eval(a, m, file.eval),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let parsed = Cli::command().try_get_matches().and_then(|m| Cli::from_arg_matches(&m).map(|c| (c, m)));
    let (cli, matches) = match parsed {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
