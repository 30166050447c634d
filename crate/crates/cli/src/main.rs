//! `divfree` command-line front end.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use divfree::eval::{divergence_check, format_metrics, predict_dataset, trajectory_metrics, TrajectoryMetrics};
use divfree::io::{load_dataset, load_model, save_dataset, save_model, write_text, RunConfig, RunLock};
use divfree::networks::AblationFlags;
use divfree::scenegen::{generate, split, TrajectoryDataset};
use divfree::segmentation::{segment_model, segmentation_metrics, SegmentMethod, SegmentationResult};
use divfree::training::{canonical_kernels, train_with, TrainReport, TrainedModel, TrainingData};
use divfree::{Error, Networks, Result, Vec3};

const THREADS_ENV: &str = "DIVFREE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "divfree", version, about = "Divergence-free rigid motion fields on particle trajectories")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for scene, training and segmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print JSON instead of plain-text tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and split it into train / extrapolation files.
    Gen(GenArgs),
    /// Fit the networks to a training dataset.
    Train(TrainArgs),
    /// Predict kernel trajectories from a checkpoint.
    Predict(PredictArgs),
    /// Compare a prediction with ground truth.
    Eval(EvalArgs),
    /// Group particles by motion.
    Segment(SegmentArgs),
    /// Probe the learned velocity field for divergence.
    Divcheck(DivcheckArgs),
    /// Train once per ablation flag and compare extrapolation errors.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    preset: Option<String>,
    /// Particles per preset object.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset; defaults to `dataset` or `<out>/train.bin`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Ablation flags, comma separated.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Last predicted time.
    #[arg(long)]
    horizon: Option<f64>,
    /// Frames after the training span; 0 echoes the final training-time state.
    #[arg(long)]
    steps: Option<usize>,
    /// Predict at this dataset's timestamps instead of a uniform grid.
    #[arg(long)]
    like: Option<PathBuf>,
    /// Dataset supplying labels and scene description for the output.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output file; defaults to `<out>/prediction.bin`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also write the metrics as JSON to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset with ground-truth labels for scoring.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    groups: Option<usize>,
    /// `physics` or `object_codes`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DivcheckArgs {
    /// Checkpoint; freshly initialised networks when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    probes: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    extrapolation: Option<PathBuf>,
    /// Flags to sweep; all of them when empty. The full model always runs.
    #[arg(long, value_delimiter = ',')]
    flags: Vec<String>,
    #[command(flatten)]
    train: TrainOverrides,
}

struct Ctx {
    config: RunConfig,
    json: bool,
    threads: usize,
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.config.output_dir
    }

    fn dataset(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit
            .clone()
            .or_else(|| self.config.dataset.clone())
            .unwrap_or_else(|| self.out().join("train.bin"))
    }

    fn extrapolation(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit
            .clone()
            .or_else(|| self.config.extrapolation.clone())
            .unwrap_or_else(|| self.out().join("extrapolation.bin"))
    }

    fn model(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out().join("model.ckpt"))
    }
}

fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn apply_train_overrides(config: &mut RunConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(v) = o.iterations {
        config.train.iterations = v;
    }
    if let Some(v) = o.dt {
        config.train.dt = v;
    }
    if let Some(v) = o.learning_rate {
        config.train.optimizer.learning_rate = v;
    }
    config.train.validate()
}

fn parse_ablation(names: &[String]) -> Result<AblationFlags> {
    let mut flags = AblationFlags::default();
    for n in names {
        let one = AblationFlags::from_name(n)?;
        flags.learnable_code |= one.learnable_code;
        flags.no_divfree_basis |= one.no_divfree_basis;
        flags.no_bottleneck_decomp |= one.no_bottleneck_decomp;
        flags.no_deform_field |= one.no_deform_field;
        flags.no_code_in_deform |= one.no_code_in_deform;
        flags.no_scale_deform |= one.no_scale_deform;
    }
    flags.validate()?;
    Ok(flags)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn gen(ctx: &mut Ctx, args: &GenArgs) -> Result<()> {
    let s = &mut ctx.config.scene;
    if let Some(p) = &args.preset {
        s.preset = Some(p.clone());
        s.objects.clear();
    }
    if let Some(v) = args.particles {
        s.particles = v;
    }
    if let Some(v) = args.frames {
        s.frames = v;
    }
    if let Some(v) = args.noise_sigma {
        s.noise_sigma = v;
    }
    if let Some(v) = args.train_fraction {
        s.train_fraction = v;
    }
    let scene = s.scene()?;
    let full = generate(&scene)?;
    let (train, extra) = split(&full, s.train_fraction)?;
    let _lock = RunLock::acquire(ctx.out())?;
    let train_path = ctx.out().join("train.bin");
    let extra_path = ctx.out().join("extrapolation.bin");
    save_dataset(&train_path, &train)?;
    save_dataset(&extra_path, &extra)?;
    let mut labels = full.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    if ctx.json {
        println!(
            "{}",
            to_json(&json!({
                "scene": scene.name,
                "particles": full.particles(),
                "labels": labels.len(),
                "train_frames": train.frames(),
                "extrapolation_frames": extra.frames(),
                "train": train_path,
                "extrapolation": extra_path,
            }))?
        );
    } else {
        println!(
            "scene {}: {} particles, {} labels, {} train frames, {} extrapolation frames -> {}",
            scene.name,
            full.particles(),
            labels.len(),
            train.frames(),
            extra.frames(),
            ctx.out().display()
        );
    }
    Ok(())
}

/// Trains on `dataset` and writes checkpoint, loss table and report into `dir`.
fn train_into(ctx: &Ctx, dataset: &TrajectoryDataset, dir: &Path) -> Result<(TrainedModel, TrainReport)> {
    let config = &ctx.config.train;
    create_dir(dir)?;
    let mut table = String::from("iteration  total  velocity  deform\n");
    let result = train_with(dataset, config, ctx.threads, |i, l| {
        table.push_str(&format!("{i:9}  {:.3e}  {:.3e}  {:.3e}\n", l.total, l.velocity, l.deform));
    });
    write_text(&dir.join("loss.txt"), &table)?;
    let (model, mut report) = match result {
        Ok(r) => r,
        Err(Error::Diverged { iteration, last_good }) => {
            let data = TrainingData::new(dataset, config.dt, &config.ablation)?;
            let model = TrainedModel {
                nets: (*last_good).clone(),
                normalization: data.normalization,
                canonical: data.canonical().to_vec(),
                dt: config.dt,
                train_end: *data.timestamps.last().expect("non-empty"),
                config: config.clone(),
            };
            let path = dir.join("model.last_good.ckpt");
            save_model(&path, &model)?;
            eprintln!("last good parameters written to {}", path.display());
            return Err(Error::Diverged { iteration, last_good });
        }
        Err(e) => return Err(e),
    };
    let ckpt = dir.join("model.ckpt");
    save_model(&ckpt, &model)?;
    if ctx.config.determinism {
        report.wall_clock_secs = 0.0;
    }
    report.checkpoint = Some(ckpt.display().to_string());
    write_text(&dir.join("train_report.json"), &to_json(&report)?)?;
    Ok((model, report))
}

fn train(ctx: &mut Ctx, args: &TrainArgs) -> Result<()> {
    apply_train_overrides(&mut ctx.config, &args.train)?;
    if !args.ablation.is_empty() {
        ctx.config.train.ablation = parse_ablation(&args.ablation)?;
    }
    let dataset = load_dataset(&ctx.dataset(&args.dataset))?;
    let _lock = RunLock::acquire(ctx.out())?;
    let (_, report) = train_into(ctx, &dataset, ctx.out())?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    if ctx.json {
        println!("{}", to_json(&report)?);
    } else {
        println!(
            "trained {} iterations, final loss {:.3e} -> {}",
            report.iterations,
            last,
            report.checkpoint.as_deref().unwrap_or("")
        );
    }
    Ok(())
}

/// Prediction times after the training span.
fn prediction_times(model: &TrainedModel, horizon: f64, steps: usize) -> Result<Vec<f64>> {
    let end = model.train_end;
    if steps == 0 {
        return Ok(vec![end]);
    }
    if !(horizon > end) {
        return Err(Error::Config(format!(
            "horizon {horizon} must lie beyond the training span ending at {end}"
        )));
    }
    Ok((1..=steps).map(|j| end + (horizon - end) * j as f64 / steps as f64).collect())
}

fn predict(ctx: &mut Ctx, args: &PredictArgs) -> Result<()> {
    let model = load_model(&ctx.model(&args.model))?;
    let (times, template) = match &args.like {
        Some(p) => {
            let like = load_dataset(p)?;
            (like.timestamps.clone(), like)
        }
        None => {
            let horizon = args.horizon.unwrap_or(ctx.config.eval.horizon);
            let steps = args.steps.unwrap_or(ctx.config.eval.steps);
            let times = prediction_times(&model, horizon, steps)?;
            (times, load_dataset(&ctx.dataset(&args.dataset))?)
        }
    };
    let pred = if times.len() == 1 && times[0] == model.train_end && args.like.is_none() {
        // the fitted state at the end of the training span
        let state = model.state_at(model.train_end)?;
        let mut d = predict_dataset(&model, &[], &template)?;
        d.timestamps = vec![model.train_end];
        for k in &state.kernels {
            d.positions.extend_from_slice(&model.normalization.to_scene(k.position).to_array());
            d.orientations.get_or_insert_with(Vec::new).extend_from_slice(&k.rotation.to_array());
        }
        d
    } else {
        predict_dataset(&model, &times, &template)?
    };
    let output = args.output.clone().unwrap_or_else(|| ctx.out().join("prediction.bin"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(&output, &pred)?;
    if ctx.json {
        println!(
            "{}",
            to_json(&json!({"output": output, "frames": pred.frames(), "particles": pred.particles(), "timestamps": pred.timestamps}))?
        );
    } else {
        println!(
            "predicted {} frames x {} particles (t = {:.3} .. {:.3}) -> {}",
            pred.frames(),
            pred.particles(),
            pred.timestamps.first().copied().unwrap_or(f64::NAN),
            pred.timestamps.last().copied().unwrap_or(f64::NAN),
            output.display()
        );
    }
    Ok(())
}

fn eval(ctx: &mut Ctx, args: &EvalArgs) -> Result<()> {
    let pred = load_dataset(&args.pred)?;
    let gt = load_dataset(&args.gt)?;
    let m = trajectory_metrics(&pred, &gt)?;
    if let Some(p) = &args.output {
        write_text(p, &to_json(&m)?)?;
    }
    if ctx.json {
        println!("{}", to_json(&m)?);
    } else {
        print!("{}", format_metrics(&m));
    }
    Ok(())
}

fn segment(ctx: &mut Ctx, args: &SegmentArgs) -> Result<()> {
    let seg = &mut ctx.config.segment;
    if let Some(v) = args.lambda {
        seg.lambda = v;
    }
    if let Some(v) = args.groups {
        seg.groups = v;
    }
    if let Some(m) = &args.method {
        seg.method = match m.as_str() {
            "physics" => SegmentMethod::Physics,
            "object_codes" => SegmentMethod::ObjectCodes,
            other => return Err(Error::Config(format!("unknown segmentation method {other:?}"))),
        };
    }
    let model = load_model(&ctx.model(&args.model))?;
    let labels_path = ctx.dataset(&args.dataset);
    let labels = if args.dataset.is_some() || labels_path.exists() {
        Some(load_dataset(&labels_path)?.labels)
    } else {
        None
    };
    let _lock = RunLock::acquire(ctx.out())?;
    let ids = segment_model(&model, &ctx.config.segment)?;
    let metrics = match &labels {
        Some(l) => Some(segmentation_metrics(&ids, l)?),
        None => None,
    };
    let mut distinct = ids.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let result = SegmentationResult {
        ids,
        groups: distinct.len(),
        metrics,
    };
    let output = args.output.clone().unwrap_or_else(|| ctx.out().join("segmentation.json"));
    write_text(&output, &to_json(&result)?)?;
    if ctx.json {
        println!("{}", to_json(&result)?);
    } else {
        println!("{} groups over {} particles -> {}", result.groups, result.ids.len(), output.display());
        if let Some(m) = &result.metrics {
            println!("AP      PQ      F1      Pre     Rec     mIoU");
            println!(
                "{:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {:.3}",
                m.ap, m.pq, m.f1, m.precision, m.recall, m.miou
            );
        }
    }
    Ok(())
}

fn divcheck(ctx: &mut Ctx, args: &DivcheckArgs) -> Result<bool> {
    let seed = ctx.config.train.seed;
    let (nets, kernels): (Networks, _) = match &args.model {
        Some(p) => {
            let model = load_model(p)?;
            let kernels = model.canonical_kernels()?;
            (model.nets, kernels)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec3> = (0..64)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let t = &ctx.config.train;
            let nets = Networks::init(t.network.clone(), t.ablation, points.len(), &points, &mut rng)?;
            let kernels = canonical_kernels(&nets, &points)?;
            (nets, kernels)
        }
    };
    if args.probes == 0 {
        eprintln!("warning: no probes requested, nothing was checked");
    }
    let report = divergence_check(&nets, &kernels, args.probes, ctx.config.eval.horizon, seed)?;
    if ctx.json {
        println!("{}", to_json(&report)?);
    } else {
        println!(
            "{} probes, max |div| {:.3e}, {} above tolerance: {}",
            report.probes,
            report.max_abs,
            report.failures,
            if report.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(report.passed)
}

fn ablate(ctx: &mut Ctx, args: &AblateArgs) -> Result<()> {
    apply_train_overrides(&mut ctx.config, &args.train)?;
    let train_set = load_dataset(&ctx.dataset(&args.dataset))?;
    let extra = load_dataset(&ctx.extrapolation(&args.extrapolation))?;
    let names: Vec<String> = if args.flags.is_empty() {
        AblationFlags::NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        args.flags.clone()
    };
    let mut runs = vec![("full".to_string(), AblationFlags::default())];
    for n in &names {
        if n != "full" {
            runs.push((n.clone(), AblationFlags::from_name(n)?));
        }
    }
    let _lock = RunLock::acquire(ctx.out())?;
    let mut rows: Vec<(String, TrajectoryMetrics)> = Vec::new();
    for (name, flags) in runs {
        let mut run = Ctx {
            config: ctx.config.clone(),
            json: ctx.json,
            threads: ctx.threads,
        };
        run.config.train.ablation = flags;
        let dir = ctx.out().join("ablate").join(&name);
        let (model, _) = train_into(&run, &train_set, &dir)?;
        let pred = predict_dataset(&model, &extra.timestamps, &extra)?;
        rows.push((name, trajectory_metrics(&pred, &extra)?));
    }
    let summary: Vec<_> = rows
        .iter()
        .map(|(n, m)| json!({"ablation": n, "rmse_percent": m.rmse_percent, "final_percent": m.final_percent, "rmse": m.rmse}))
        .collect();
    write_text(&ctx.out().join("ablate.json"), &to_json(&summary)?)?;
    if ctx.json {
        println!("{}", to_json(&summary)?);
    } else {
        println!("{:<22}  rmse%    final%", "ablation");
        for (n, m) in &rows {
            println!("{n:<22}  {:.3}  {:.3}", m.rmse_percent, m.final_percent);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.scene.seed = seed;
        config.train.seed = seed;
        config.segment.seed = seed;
    }
    let mut ctx = Ctx {
        config,
        json: cli.json,
        threads: thread_count()?,
    };
    match &cli.command {
        Command::Gen(a) => gen(&mut ctx, a)?,
        Command::Train(a) => train(&mut ctx, a)?,
        Command::Predict(a) => predict(&mut ctx, a)?,
        Command::Eval(a) => eval(&mut ctx, a)?,
        Command::Segment(a) => segment(&mut ctx, a)?,
        Command::Divcheck(a) => {
            if !divcheck(&mut ctx, a)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate(a) => ablate(&mut ctx, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
