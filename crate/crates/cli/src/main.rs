//! `splatrig` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splatrig::grad::{self, CheckConfig};
use splatrig::io::{self, Rings};
use splatrig::losses::{metrics, psnr_from_mse};
use splatrig::mouth_struct::{build_mouth_structure, splice};
use splatrig::rig_synth::{generate_scene, head_base_mesh, SceneKind, SceneSpec};
use splatrig::trainer::{self, TrainConfig};
use splatrig::{checkpoint, Error};

/// Largest relative error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;
const DEFAULT_MOUTH_DEPTH: f64 = 0.3;

#[derive(Parser)]
#[command(name = "splatrig", version, about = "Mesh-rigged Gaussian splat avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add teeth, palate and floor to a mesh with lip rings.
    AugmentMesh(AugmentArgs),
    /// Render a synthetic scene directory.
    GenScene(GenSceneArgs),
    /// Fit splats to a scene directory.
    Train(TrainArgs),
    /// Render a parameter sequence from a checkpoint.
    Animate(AnimateArgs),
    /// Compare two PPM images.
    Eval(EvalArgs),
    /// Print the pre-allocation outcome stored in a checkpoint.
    ApsReport(ApsReportArgs),
    /// Finite-difference check of every registered gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    obj: PathBuf,
    /// Part mask of the input; one part when omitted.
    #[arg(long)]
    parts: Option<PathBuf>,
    #[arg(long)]
    rings: PathBuf,
    /// Overrides the depth in the rings file.
    #[arg(long)]
    depth: Option<f64>,
    #[arg(long)]
    out_obj: PathBuf,
    #[arg(long)]
    out_parts: PathBuf,
}

#[derive(Args)]
struct GenSceneArgs {
    /// smoke, aps or ablation.
    #[arg(long, default_value = "smoke")]
    preset: String,
    /// Scene spec TOML; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Training config TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written every `--checkpoint-interval` steps and at the end.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    aps_step: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    test_frames: Option<usize>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    no_deform: bool,
    #[arg(long)]
    no_fold_phi: bool,
    /// Average the regularizer over splats instead of summing.
    #[arg(long)]
    reg_mean: bool,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parameter sequence; the scene's own when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write PNG copies.
    #[arg(long)]
    png: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct ApsReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Only ops of this module (e.g. `losses`, `renderer`).
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::AugmentMesh(a) => augment_mesh(a),
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => train(a),
        Command::Animate(a) => animate(a),
        Command::Eval(a) => eval(a),
        Command::ApsReport(a) => aps_report(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn augment_mesh(a: AugmentArgs) -> CliResult<ExitCode> {
    let mesh = io::load_mesh(&a.obj, a.parts.as_deref())?;
    let rings = Rings::parse(&std::fs::read_to_string(&a.rings).map_err(Error::from)?)?;
    let depth = a.depth.or(rings.depth).unwrap_or(DEFAULT_MOUTH_DEPTH);
    let aug = build_mouth_structure(&mesh, &rings.upper, &rings.lower, depth)?;
    let (out, parts) = splice(&mesh, &aug)?;
    io::save_mesh(&out, &a.out_obj, &a.out_parts)?;
    println!(
        "vertices={} faces={} upper_part={} lower_part={} new_faces={}",
        out.vertices.len(),
        out.num_faces(),
        parts.upper_part,
        parts.lower_part,
        aug.new_faces.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_toml_text(path: &Path) -> CliResult<String> {
    Ok(std::fs::read_to_string(path).map_err(Error::from)?)
}

fn gen_scene(a: GenSceneArgs) -> CliResult<ExitCode> {
    let spec = match &a.spec {
        Some(p) => io::parse_scene_spec(&read_toml_text(p)?)?,
        None => match a.preset.as_str() {
            "smoke" => SceneSpec::smoke(),
            "aps" => SceneSpec::aps(),
            "ablation" => SceneSpec::ablation(),
            other => return Err(Failure::Usage(format!("unknown preset `{other}` (smoke, aps, ablation)"))),
        },
    };
    let scene = generate_scene(&spec, a.seed)?;
    io::save_scene(&a.out, &scene)?;
    io::save_mesh(&scene.rig.base, &a.out.join("rig.obj"), &a.out.join("rig.parts.toml"))?;
    if spec.kind == SceneKind::Head {
        let (head, upper, lower) = head_base_mesh()?;
        io::save_mesh(&head, &a.out.join("head.obj"), &a.out.join("head.parts.toml"))?;
        let mut rings = Rings::new(upper, lower);
        rings.depth = Some(spec.mouth_depth);
        std::fs::write(a.out.join("head.rings.toml"), rings.to_text()).map_err(Error::from)?;
    }
    println!(
        "frames={} faces={} splats={} width={} height={}",
        scene.images.len(),
        scene.rig.base.num_faces(),
        scene.reference.len(),
        spec.width,
        spec.height
    );
    Ok(ExitCode::SUCCESS)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&read_toml_text(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => TrainConfig::desk(),
    };
    let c = &mut cfg;
    if let Some(v) = a.steps {
        c.total_steps = v;
    }
    if let Some(v) = a.aps_step {
        c.aps_step = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.threads {
        c.threads = v;
    }
    if let Some(v) = a.test_frames {
        c.test_frames = v;
    }
    if let Some(v) = a.log_interval {
        c.log_interval = v;
    }
    if let Some(v) = a.checkpoint_interval {
        c.checkpoint_interval = v;
    }
    c.deform &= !a.no_deform;
    c.fold_phi &= !a.no_fold_phi;
    c.reg_mean_reduction |= a.reg_mean;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn metrics_line(prefix: &str, m: &splatrig::losses::Metrics) -> String {
    format!("{prefix}_mse={:e} {prefix}_psnr={:.4} {prefix}_ssim={:.6}", m.mse, m.psnr, m.ssim)
}

fn train(a: TrainArgs) -> CliResult<ExitCode> {
    let cfg = train_config(&a)?;
    let scene = io::load_scene(&a.scene)?;
    let resume = a.resume.as_deref().map(checkpoint::load).transpose()?;
    let data = scene.train_data();
    let path = a.checkpoint.clone();
    let result = trainer::fit_with(&cfg, &data, resume, |state| checkpoint::save(&path, state))?;
    for rec in &result.history {
        println!("{}", rec.to_line());
    }
    if let Some(ev) = &result.state.aps_event {
        for line in ev.to_lines() {
            println!("{line}");
        }
    }
    println!("{}", metrics_line("train", &result.train_metrics));
    if let Some(m) = &result.test_metrics {
        println!("{}", metrics_line("test", m));
    }
    println!("splats={} steps={}", result.state.splats.len(), result.state.step);
    Ok(ExitCode::SUCCESS)
}

fn animate(a: AnimateArgs) -> CliResult<ExitCode> {
    if a.threads == 0 {
        return Err(Failure::Usage("--threads must be positive".into()));
    }
    let scene = io::load_scene(&a.scene)?;
    let state = checkpoint::load(&a.checkpoint)?;
    let params = match &a.params {
        Some(p) => io::parse_params(&read_toml_text(p)?)?,
        None => scene.params.clone(),
    };
    let data = scene.train_data();
    let pool = rayon_pool(a.threads)?;
    let images = pool.install(|| trainer::animate(&state, &scene.rig, &params, &scene.camera, &data.settings()))?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    for (i, img) in images.iter().enumerate() {
        let base = a.out.join(format!("frame_{i:04}"));
        io::write_ppm(&base.with_extension("ppm"), img)?;
        if a.png {
            let bytes: Vec<u8> = img.data.iter().map(|&v| io::quantize(v)).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .expect("buffer matches image size")
                .save(base.with_extension("png"))
                .map_err(|e| Error::Invalid(format!("png: {e}")))?;
        }
    }
    println!("frames={}", images.len());
    Ok(ExitCode::SUCCESS)
}

fn rayon_pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn eval(a: EvalArgs) -> CliResult<ExitCode> {
    let pred = io::read_ppm(&a.pred)?;
    let reference = io::read_ppm(&a.reference)?;
    let m = metrics(&pred, &reference)?;
    println!("mse={} psnr={} ssim={}", m.mse, psnr_from_mse(m.mse), m.ssim);
    Ok(ExitCode::SUCCESS)
}

fn aps_report(a: ApsReportArgs) -> CliResult<ExitCode> {
    let state = checkpoint::load(&a.checkpoint)?;
    match &state.aps_event {
        Some(ev) => {
            for line in ev.to_lines() {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        None => Err(Failure::Data(Error::Invalid(format!(
            "checkpoint at step {} has not reached pre-allocation (scheduled at step {})",
            state.step, state.aps.scheduled_step
        )))),
    }
}

fn grad_check(a: GradCheckArgs) -> CliResult<ExitCode> {
    let ops = grad::registry_for(a.module.as_deref(), a.seed);
    if ops.is_empty() {
        return Err(Failure::Usage(format!(
            "no differentiable ops in module `{}`",
            a.module.unwrap_or_default()
        )));
    }
    let cfg = CheckConfig {
        trials: a.trials,
        seed: a.seed,
        ..CheckConfig::default()
    };
    let mut worst = 0.0f64;
    for op in &ops {
        let report = grad::check_op(op.as_ref(), &cfg)?;
        println!("{}", report.to_line());
        worst = worst.max(report.max_rel_error);
    }
    let pass = worst <= GRAD_TOLERANCE;
    println!("max_rel_error={worst:e} tolerance={GRAD_TOLERANCE:e} pass={pass}");
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
