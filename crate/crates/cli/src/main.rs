mod config;
mod render;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyadmotion_core::arrayfile::{read_matrix, write_matrix};
use dyadmotion_core::audio::{extract_features, load_external_features, AudioFeatures, FrontEnd, Waveform};
use dyadmotion_core::metrics::EvalReport;
use dyadmotion_core::sequence::{subsample_with_stride, FrameSeq, MotionSequence};
use dyadmotion_core::synth::generate_corpus;
use dyadmotion_core::take::{load_take, Corpus, Split, Take};
use dyadmotion_core::{Skeleton, GUIDE_STRIDE};
use dyadmotion_models::body::{generate_body, ground_truth_guides, train_body_model};
use dyadmotion_models::evaluate::{evaluate, evaluate_ground_truth, BodyPipeline, KnnGenerator, RandomGenerator, VqOnlyGenerator};
use dyadmotion_models::face::{generate_face, train_face_model, train_lip_regressor};
use dyadmotion_models::guide::{generate_guide_poses, train_guide_transformer};
use dyadmotion_models::{
    train_rvq, BodyModel, BodyVariant, FaceModel, FaceVariant, GuideTransformer, LipRegressor, RvqModel, StageSeeds,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::AppConfig;
use render::{render_frames, Panel, RenderOptions};

const SAMPLE_FORMAT_VERSION: &str = "dyadmotion-sample/1";

#[derive(Parser)]
#[command(name = "dyadmotion", version, about = "Audio-driven dyadic face and body motion")]
struct Cli {
    /// TOML configuration file; missing tables and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic corpus with train/val/test splits.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        takes: Option<usize>,
        /// Seconds per take.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Trains one model on the train split and writes its checkpoint under --models.
    Train(TrainArgs),
    /// Generates motion for one audio clip.
    Sample(SampleArgs),
    /// Evaluates systems on a split and writes a JSON report.
    Eval(EvalArgs),
    /// Renders stick-figure frames of a take or a sample.
    Visualize(VisualizeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Lip,
    Face,
    Rvq,
    Guide,
    Body,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Corpus directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint root; each model lives in its own subdirectory.
    #[arg(long)]
    models: PathBuf,
    /// Ablation: body full|no_audio|no_guides|uncond, face full|no_lips|uncond.
    #[arg(long)]
    variant: Option<String>,
    /// Train the per-frame tokenizer or transformer of the VQ-only baseline (rvq and guide only).
    #[arg(long)]
    vq_only: bool,
    /// Overrides the configured number of optimisation steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the conditioning dropout probability of the diffusion models.
    #[arg(long)]
    cond_drop_prob: Option<f64>,
}

#[derive(Args)]
struct AudioArgs {
    /// A take directory whose audio features are used.
    #[arg(long, conflicts_with_all = ["audio_features", "wav_self", "wav_other"])]
    take: Option<PathBuf>,
    /// "builtin" (computed from --wav-self/--wav-other) or a feature file path.
    #[arg(long)]
    audio_features: Option<String>,
    #[arg(long)]
    wav_self: Option<PathBuf>,
    #[arg(long)]
    wav_other: Option<PathBuf>,
    /// Resample a feature file that is not at 30 Hz.
    #[arg(long)]
    resample: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    models: PathBuf,
    #[command(flatten)]
    audio: AudioArgs,
    /// Only sample guide poses.
    #[arg(long, group = "mode")]
    guide_only: bool,
    /// Only sample face codes.
    #[arg(long, group = "mode")]
    face: bool,
    /// Face and body (the default).
    #[arg(long, group = "mode")]
    full: bool,
    /// Body checkpoint variant to use.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Diffusion sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Crop the audio to this many seconds (0 keeps it all).
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    models: Option<PathBuf>,
    /// Comma-separated: gt, random, knn, full, no_audio, no_guides, uncond, no_lips, vq_only.
    #[arg(long, value_delimiter = ',', default_value = "gt,random,knn,full")]
    system: Vec<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Samples per clip.
    #[arg(long)]
    group_size: Option<usize>,
    /// Diffusion sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    /// A take or sample directory holding motion.bin.
    #[arg(long)]
    input: PathBuf,
    /// A second directory drawn side by side with the first.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Adds a strip chart of face-code magnitude.
    #[arg(long)]
    face_strip: bool,
    /// Skeleton TOML (defaults to the built-in desk skeleton).
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long, default_value_t = 240)]
    width: u32,
    #[arg(long, default_value_t = 320)]
    height: u32,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateData { out, takes, duration } => generate_data(&config, cli.seed, &out, takes, duration),
        Command::Train(args) => train(&config, cli.seed, &args),
        Command::Sample(args) => sample(&config, cli.seed, &args),
        Command::Eval(args) => eval(&config, &args),
        Command::Visualize(args) => visualize(&args),
    }
}

fn generate_data(config: &AppConfig, seed: u64, out: &Path, takes: Option<usize>, duration: Option<f64>) -> Result<()> {
    let n = takes.unwrap_or(config.data.takes);
    let seconds = duration.unwrap_or(config.data.duration_s);
    let start = Instant::now();
    let corpus = generate_corpus::<f32>(seed, n, seconds, &config.data.style)?;
    let written = Corpus::write(out, &corpus, seed, seconds)?;
    let count = |s| written.ids(s).len();
    log::info!(
        "wrote {n} takes of {seconds} s to {} (train {}, val {}, test {}) in {:.1?}",
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        start.elapsed()
    );
    Ok(())
}

/// Subdirectory of a checkpoint under the models root.
fn checkpoint_name(model: ModelKind, variant: Option<&str>, vq_only: bool) -> String {
    let base = match model {
        ModelKind::Lip => "lip",
        ModelKind::Face => "face",
        ModelKind::Rvq => "rvq",
        ModelKind::Guide => "guide",
        ModelKind::Body => "body",
    };
    match (variant, vq_only) {
        (_, true) => format!("{base}_vq_only"),
        (Some(v), false) if v != "full" => format!("{base}_{v}"),
        _ => base.to_string(),
    }
}

fn load_split(data: &Path, split: Split) -> Result<Vec<Take<f32>>> {
    let corpus = Corpus::open(data).with_context(|| format!("opening corpus {}", data.display()))?;
    let takes = corpus.load_split(split)?;
    ensure!(!takes.is_empty(), "the {split:?} split of {} is empty", data.display());
    Ok(takes)
}

fn train(config: &AppConfig, seed: u64, args: &TrainArgs) -> Result<()> {
    if args.vq_only && !matches!(args.model, ModelKind::Rvq | ModelKind::Guide) {
        bail!("--vq-only applies to the rvq and guide models");
    }
    if args.variant.is_some() && !matches!(args.model, ModelKind::Face | ModelKind::Body) {
        bail!("--variant applies to the face and body models");
    }
    let takes = load_split(&args.data, Split::Train)?;
    let out = args.models.join(checkpoint_name(args.model, args.variant.as_deref(), args.vq_only));
    let start = Instant::now();
    let diffusion = |base: &dyadmotion_models::DiffusionConfig| {
        let mut c = base.clone();
        if let Some(s) = args.steps {
            c.steps = s;
        }
        if let Some(p) = args.cond_drop_prob {
            c.cond_drop_prob = p;
        }
        c
    };
    match args.model {
        ModelKind::Lip => {
            let mut c = config.lip.clone();
            c.steps = args.steps.unwrap_or(c.steps);
            train_lip_regressor(&takes, &c, seed)?.save(&out)?;
        }
        ModelKind::Face => {
            let variant: FaceVariant = args.variant.as_deref().unwrap_or("full").parse()?;
            let lip = if variant.slots().lips {
                Some(LipRegressor::load(&args.models.join("lip")).context("the full face model needs a trained lip regressor")?)
            } else {
                None
            };
            train_face_model(&takes, lip.as_ref(), &diffusion(&config.face), variant, seed)?.save(&out)?;
        }
        ModelKind::Rvq => {
            let mut c = if args.vq_only { config.vq_only.rvq.clone() } else { config.rvq.clone() };
            c.steps = args.steps.unwrap_or(c.steps);
            let guides = takes
                .iter()
                .map(|t| if args.vq_only { subsample_with_stride(&t.motion, 1) } else { ground_truth_guides(t) })
                .collect::<dyadmotion_core::Result<Vec<_>>>()?;
            let model = train_rvq(&guides, &c, seed)?;
            log::info!("reconstruction MSE on the train split: {:.5}", model.reconstruction_mse(&guides, c.depth)?);
            model.save(&out)?;
        }
        ModelKind::Guide => {
            let mut c = if args.vq_only { config.vq_only.guide.clone() } else { config.guide.clone() };
            c.steps = args.steps.unwrap_or(c.steps);
            let rvq_dir = args.models.join(checkpoint_name(ModelKind::Rvq, None, args.vq_only));
            let rvq = RvqModel::load(&rvq_dir).with_context(|| format!("loading the tokenizer from {}", rvq_dir.display()))?;
            train_guide_transformer(&takes, &rvq, &c, seed)?.save(&out)?;
        }
        ModelKind::Body => {
            let variant: BodyVariant = args.variant.as_deref().unwrap_or("full").parse()?;
            train_body_model(&takes, &diffusion(&config.body), variant, seed)?.save(&out)?;
        }
    }
    log::info!("trained {} in {:.1?}; checkpoint at {}", checkpoint_name(args.model, args.variant.as_deref(), args.vq_only), start.elapsed(), out.display());
    Ok(())
}

fn load_audio(args: &AudioArgs) -> Result<AudioFeatures<f32>> {
    if let Some(dir) = &args.take {
        return Ok(load_take::<f32>(dir)?.audio);
    }
    match args.audio_features.as_deref() {
        Some("builtin") | None => {
            let (Some(a), Some(b)) = (&args.wav_self, &args.wav_other) else {
                bail!("give --take, a feature file with --audio-features, or --wav-self and --wav-other");
            };
            Ok(extract_features(&Waveform::read_wav(a)?, &Waveform::read_wav(b)?, &FrontEnd::default())?)
        }
        Some(path) => Ok(load_external_features(Path::new(path), args.resample)?),
    }
}

fn crop_seconds(audio: AudioFeatures<f32>, seconds: f64) -> Result<AudioFeatures<f32>> {
    if seconds <= 0.0 {
        return Ok(audio);
    }
    let frames = ((seconds * 30.0).round() as usize).min(audio.frames());
    Ok(audio.slice(0, frames)?)
}

fn load_body(models: &Path, variant: &str) -> Result<BodyModel> {
    let v: BodyVariant = variant.parse()?;
    let dir = models.join(checkpoint_name(ModelKind::Body, Some(v.name()), false));
    BodyModel::load(&dir).with_context(|| format!("loading body model from {}", dir.display()))
}

fn load_face(models: &Path, variant: &str) -> Result<(Option<LipRegressor>, FaceModel)> {
    let v: FaceVariant = variant.parse()?;
    let dir = models.join(checkpoint_name(ModelKind::Face, Some(v.name()), false));
    let face = FaceModel::load(&dir).with_context(|| format!("loading face model from {}", dir.display()))?;
    let lip = if face.needs_lips() { Some(LipRegressor::load(&models.join("lip"))?) } else { None };
    Ok((lip, face))
}

fn load_guides(models: &Path, vq_only: bool) -> Result<(RvqModel, GuideTransformer)> {
    let rvq = RvqModel::load(&models.join(checkpoint_name(ModelKind::Rvq, None, vq_only)))?;
    let guide = GuideTransformer::load(&models.join(checkpoint_name(ModelKind::Guide, None, vq_only)))?;
    Ok((rvq, guide))
}

fn sample(config: &AppConfig, seed: u64, args: &SampleArgs) -> Result<()> {
    let audio = crop_seconds(load_audio(&args.audio)?, args.duration.unwrap_or(config.sample.duration_s))?;
    let top_p = args.top_p.unwrap_or(config.sample.top_p);
    let scale = args.guidance_scale.unwrap_or(config.sample.guidance_scale);
    let seeds = StageSeeds::from_seed(seed);
    let k = audio.frames() / GUIDE_STRIDE;
    ensure!(k > 0, "audio has {} frames; at least {GUIDE_STRIDE} are needed", audio.frames());
    let audio = audio.slice(0, k * GUIDE_STRIDE)?;
    std::fs::create_dir_all(&args.out)?;
    let mode = if args.guide_only {
        "guide_only"
    } else if args.face {
        "face"
    } else {
        "full"
    };
    let start = Instant::now();
    let mut written = Vec::new();
    if mode == "guide_only" || mode == "full" {
        let mut body = if mode == "full" { Some(load_body(&args.models, &args.variant)?) } else { None };
        if let (Some(b), Some(steps)) = (body.as_mut(), args.steps) {
            b.denoiser.config.sample_steps = steps;
        }
        let guides = if mode == "guide_only" || body.as_ref().is_some_and(|b| b.needs_guides()) {
            let (rvq, guide) = load_guides(&args.models, false)?;
            let g = generate_guide_poses(&audio, &guide, &rvq, top_p, &mut ChaCha8Rng::seed_from_u64(seeds.guides))?;
            write_matrix(&args.out.join("guides.bin"), "guides", &g.poses().to_owned())?;
            written.push("guides");
            Some(g)
        } else {
            None
        };
        if let Some(body) = &body {
            let motion = generate_body(&audio, guides.as_ref(), body, scale, &mut ChaCha8Rng::seed_from_u64(seeds.body))?;
            write_matrix(&args.out.join("motion.bin"), "motion", &motion.frames().to_owned())?;
            written.push("motion");
        }
    }
    if mode == "face" || mode == "full" {
        let (lip, mut face) = load_face(&args.models, "full")?;
        if let Some(steps) = args.steps {
            face.denoiser.config.sample_steps = steps;
        }
        let codes = generate_face(&audio, lip.as_ref(), &face, scale, &mut ChaCha8Rng::seed_from_u64(seeds.face))?;
        write_matrix(&args.out.join("face.bin"), "face", &codes.frames().to_owned())?;
        written.push("face");
    }
    let meta = json!({
        "version": SAMPLE_FORMAT_VERSION,
        "mode": mode,
        "frames": audio.frames(),
        "fps": 30,
        "seed": seed,
        "top_p": top_p,
        "guidance_scale": scale,
        "body_variant": args.variant,
        "files": written,
    });
    std::fs::write(args.out.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    log::info!("sampled {} frames ({mode}) in {:.1?} into {}", audio.frames(), start.elapsed(), args.out.display());
    Ok(())
}

fn eval(config: &AppConfig, args: &EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let train = load_split(&args.data, Split::Train)?;
    let takes = load_split(&args.data, split)?;
    let mut eval_config = config.eval.clone();
    if let Some(s) = &args.seeds {
        eval_config.seeds = s.clone();
    }
    if let Some(g) = args.group_size {
        eval_config.group_size = g;
    }
    let mut report = EvalReport::new(args.split.clone(), eval_config.seeds.clone(), takes.iter().map(|t| t.id.clone()).collect());
    let models = || args.models.as_deref().context("--models is required for learned systems");
    let steps = |mut b: BodyModel| {
        if let Some(s) = args.steps {
            b.denoiser.config.sample_steps = s;
        }
        b
    };
    let with_steps = |mut f: FaceModel| {
        if let Some(s) = args.steps {
            f.denoiser.config.sample_steps = s;
        }
        f
    };
    for system in &args.system {
        let start = Instant::now();
        let (top_p, scale) = (eval_config.top_p, eval_config.guidance_scale);
        let result = match system.as_str() {
            "gt" => evaluate_ground_truth(&takes, &eval_config)?,
            "random" => evaluate(&RandomGenerator { train: &train }, &takes, &eval_config)?,
            "knn" => evaluate(&KnnGenerator { train: &train }, &takes, &eval_config)?,
            "vq_only" => {
                let (rvq, guide) = load_guides(models()?, true)?;
                let (lip, face) = load_face(models()?, "full")?;
                let face = with_steps(face);
                let g = VqOnlyGenerator {
                    rvq: &rvq,
                    guide: &guide,
                    lip: lip.as_ref(),
                    face: Some(&face),
                    top_p,
                    guidance_scale: scale,
                };
                evaluate(&g, &takes, &eval_config)?
            }
            name => {
                let (body_variant, face_variant) = match name {
                    "no_lips" => ("full", "no_lips"),
                    other => (other, "full"),
                };
                let body = steps(load_body(models()?, body_variant)?);
                let (lip, face) = load_face(models()?, face_variant)?;
                let face = with_steps(face);
                let (rvq, guide) = load_guides(models()?, false)?;
                let g = BodyPipeline {
                    lip: lip.as_ref(),
                    face: Some(&face),
                    rvq: &rvq,
                    guide: &guide,
                    body: &body,
                    top_p,
                    guidance_scale: scale,
                };
                evaluate(&g, &takes, &eval_config)?
            }
        };
        log::info!("evaluated {system} in {:.1?}", start.elapsed());
        report.systems.insert(system.clone(), result);
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, report.to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    log::info!("report written to {}", args.out.display());
    Ok(())
}

fn read_panel(dir: &Path) -> Result<Panel> {
    let motion: Array2<f32> = read_matrix(&dir.join("motion.bin"), "motion")
        .map_err(anyhow::Error::msg)
        .with_context(|| format!("reading motion from {}", dir.display()))?;
    let face_path = dir.join("face.bin");
    let face = if face_path.is_file() {
        Some(read_matrix(&face_path, "face").map_err(anyhow::Error::msg)?)
    } else {
        None
    };
    MotionSequence::at_30fps(motion.clone())?;
    Ok(Panel { motion, face })
}

fn visualize(args: &VisualizeArgs) -> Result<()> {
    let skeleton = match &args.skeleton {
        Some(path) => Skeleton::load(path)?,
        None => Skeleton::desk(),
    };
    let mut panels = vec![read_panel(&args.input)?];
    if let Some(other) = &args.compare {
        panels.push(read_panel(other)?);
    }
    let options = RenderOptions {
        width: args.width,
        height: args.height,
        face_strip: args.face_strip,
    };
    let start = Instant::now();
    let n = render_frames(&panels, &skeleton, options, &args.out)?;
    log::info!("rendered {n} frames to {} in {:.1?}", args.out.display(), start.elapsed());
    Ok(())
}
