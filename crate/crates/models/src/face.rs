//! Audio-to-lip regressor and the face diffusion model conditioned on audio and predicted lips.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{FaceSequence, LipSequence};
use dyadmotion_core::take::Take;
use dyadmotion_core::{Error, FrameSeq, Result, Scalar};
use dyadmotion_nn::{Adam, AdamConfig, Conv1d, Gradients, Graph, Linear, ParamStore, Var};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{read_manifest, read_stores, write_checkpoint, LossLog, Manifest};
use crate::denoiser::{draw_window, Denoiser, DiffusionConfig, OwnedConditioning, StreamDims};
use crate::diffusion::{ConditioningBundle, Slot, SlotSet};
use crate::norm::Normalizer;
use crate::TrainInfo;

pub const LIP_MODEL_KIND: &str = "lip";
pub const FACE_MODEL_KIND: &str = "face";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LipConfig {
    pub hidden: usize,
    /// Dilations of the centred kernel-3 convolutions; 1, 2, 4 and 8 see ±15 frames (0.5 s each way).
    pub dilations: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub std_floor: f64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for LipConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            dilations: vec![1, 2, 4, 8],
            steps: 3000,
            batch: 8,
            window: 120,
            std_floor: 0.01,
            log_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

/// Temporal convolution stack from the self audio stream to lip vertices.
pub struct LipRegressor<T: Scalar> {
    pub config: LipConfig,
    audio_dim: usize,
    lip_dim: usize,
    params: ParamStore<T>,
    input: Linear,
    convs: Vec<Conv1d>,
    output: Linear,
    norm: Normalizer<T>,
    pub info: TrainInfo,
}

impl<T: Scalar> LipRegressor<T> {
    pub fn new(config: LipConfig, audio_dim: usize, lip_dim: usize, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.batch == 0 || config.window == 0 {
            return Err(Error::invalid("lip regressor sizes must be positive"));
        }
        if lip_dim == 0 || lip_dim % 3 != 0 {
            return Err(Error::invalid(format!("lip width {lip_dim} is not a multiple of 3")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let input = Linear::new(&mut params, "in", audio_dim, h, &mut rng);
        let convs = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Conv1d::centred(&mut params, &format!("conv{i}"), d, h, h, &mut rng))
            .collect();
        let output = Linear::new(&mut params, "out", h, lip_dim, &mut rng);
        Ok(Self {
            config,
            audio_dim,
            lip_dim,
            params,
            input,
            convs,
            output,
            norm: Normalizer::identity(lip_dim),
            info: TrainInfo::new(seed),
        })
    }

    pub fn lip_dim(&self) -> usize {
        self.lip_dim
    }

    fn forward(&self, g: &mut Graph<'_, T>, self_audio: Array2<T>) -> Var {
        let x = g.constant(self_audio);
        let mut h = self.input.forward(g, x);
        for conv in &self.convs {
            let c = conv.forward(g, h);
            let c = g.relu(c);
            h = g.add(h, c);
        }
        self.output.forward(g, h)
    }

    /// Lip vertices for every audio frame; only the self stream is used.
    pub fn predict_lips(&self, audio: &AudioFeatures<T>) -> Result<LipSequence<T>> {
        if audio.feature_dim() != self.audio_dim {
            return Err(Error::shape(format!("audio width {} differs from the regressor's {}", audio.feature_dim(), self.audio_dim)));
        }
        let mut g = Graph::new(&self.params);
        let y = self.forward(&mut g, audio.stream(0).to_owned());
        LipSequence::new(self.norm.invert(g.value(y)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest::new(
            LIP_MODEL_KIND,
            &SavedLip {
                lip: self.config.clone(),
                audio_dim: self.audio_dim,
                lip_dim: self.lip_dim,
            },
            self.info.seed,
            self.info.step,
            self.info.losses.clone(),
        )?;
        let mut buffers = ParamStore::new();
        self.norm.register(&mut buffers, "norm");
        write_checkpoint(dir, &manifest, &self.params, &buffers)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir, LIP_MODEL_KIND)?;
        let saved: SavedLip = manifest.config()?;
        let mut model = Self::new(saved.lip, saved.audio_dim, saved.lip_dim, manifest.seed)?;
        let mut buffers = ParamStore::new();
        model.norm.register(&mut buffers, "norm");
        read_stores(dir, &mut model.params, &mut buffers)?;
        model.norm = Normalizer::from_store(&buffers, "norm")?;
        model.info = TrainInfo {
            seed: manifest.seed,
            step: manifest.step,
            losses: manifest.losses,
        };
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedLip {
    lip: LipConfig,
    audio_dim: usize,
    lip_dim: usize,
}

fn check_corpus<T: Scalar>(takes: &[Take<T>]) -> Result<&Take<T>> {
    let first = takes.first().ok_or_else(|| Error::invalid("training corpus is empty"))?;
    for t in takes {
        t.validate()?;
        if t.audio.feature_dim() != first.audio.feature_dim() || t.lips.dim() != first.lips.dim() {
            return Err(Error::shape(format!("take {} differs in feature or lip width", t.id)));
        }
    }
    Ok(first)
}

/// Minimises the MSE between predicted and ground-truth lips (in normalised units) on random
/// windows.
pub fn train_lip_regressor<T: Scalar>(takes: &[Take<T>], config: &LipConfig, seed: u64) -> Result<LipRegressor<T>> {
    let first = check_corpus(takes)?;
    let mut model = LipRegressor::new(config.clone(), first.audio.feature_dim(), first.lips.dim(), seed)?;
    let views: Vec<_> = takes.iter().map(|t| t.lips.frames()).collect();
    model.norm = Normalizer::fit(&views, config.std_floor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c69_7073);
    let mut opt = Adam::new(config.adam, &model.params);
    let mut log = LossLog::new(config.log_every);
    let inv = T::one() / T::lit_usize(config.batch);
    for step in 0..config.steps {
        let mut grads = Gradients::zeros_like(&model.params);
        let mut total = 0.0;
        for _ in 0..config.batch {
            let take = &takes[rng.random_range(0..takes.len())];
            let len = config.window.min(take.frames());
            let start = rng.random_range(0..=take.frames() - len);
            let audio = take.audio.stream(0).slice(s![start..start + len, ..]).to_owned();
            let target = model.norm.apply(take.lips.frames().slice(s![start..start + len, ..]));
            let mut g = Graph::new(&model.params);
            let y = model.forward(&mut g, audio);
            let target = g.constant(target);
            let loss = g.mse(y, target);
            total += g.scalar(loss).as_f64();
            let loss = g.scale(loss, inv);
            g.backward(loss, &mut grads);
        }
        log.push("lip", step, total / config.batch as f64)?;
        opt.step(&mut model.params, &mut grads);
    }
    if !model.params.is_finite() {
        return Err(Error::Diverged {
            model: "lip".into(),
            step: config.steps,
        });
    }
    model.info.step = config.steps;
    model.info.losses = log.finish();
    Ok(model)
}

/// Which conditioning the face model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceVariant {
    /// Audio and predicted lips.
    Full,
    /// Audio only (no lip regressor).
    NoLips,
    /// No conditioning.
    Uncond,
}

impl FaceVariant {
    pub fn slots(self) -> SlotSet {
        match self {
            FaceVariant::Full => SlotSet {
                audio: true,
                lips: true,
                guides: false,
            },
            FaceVariant::NoLips => SlotSet {
                audio: true,
                ..SlotSet::NONE
            },
            FaceVariant::Uncond => SlotSet::NONE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaceVariant::Full => "full",
            FaceVariant::NoLips => "no_lips",
            FaceVariant::Uncond => "uncond",
        }
    }
}

impl std::str::FromStr for FaceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FaceVariant::Full),
            "no_lips" => Ok(FaceVariant::NoLips),
            "uncond" => Ok(FaceVariant::Uncond),
            other => Err(Error::invalid(format!("unknown face variant {other:?} (full, no_lips, uncond)"))),
        }
    }
}

pub struct FaceModel<T: Scalar> {
    pub variant: FaceVariant,
    pub denoiser: Denoiser<T>,
}

impl<T: Scalar> FaceModel<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.denoiser.save_as(dir, FACE_MODEL_KIND, &self.variant)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (denoiser, extra) = Denoiser::load_as(dir, FACE_MODEL_KIND)?;
        Ok(Self {
            variant: serde_json::from_value(extra)?,
            denoiser,
        })
    }

    pub fn needs_lips(&self) -> bool {
        self.variant.slots().lips
    }
}

/// Trains the face denoiser. The lip slot is fed the regressor's predictions (not ground truth),
/// matching what the model receives at generation time.
pub fn train_face_model<T: Scalar>(
    takes: &[Take<T>],
    regressor: Option<&LipRegressor<T>>,
    config: &DiffusionConfig,
    variant: FaceVariant,
    seed: u64,
) -> Result<FaceModel<T>> {
    let first = check_corpus(takes)?;
    let slots = variant.slots();
    let lips: Vec<Option<LipSequence<T>>> = if slots.lips {
        let reg = regressor.ok_or_else(|| Error::invalid("the full face model needs a lip regressor"))?;
        takes.iter().map(|t| reg.predict_lips(&t.audio).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; takes.len()]
    };
    let dims = StreamDims {
        sample: first.face.dim(),
        audio: first.audio.feature_dim(),
        lips: first.lips.dim(),
        guides: 0,
    };
    let mut denoiser = Denoiser::new(config.clone(), slots, dims, seed)?;
    let faces: Vec<_> = takes.iter().map(|t| t.face.frames()).collect();
    denoiser.sample_norm = Normalizer::fit(&faces, config.std_floor)?;
    if let Some(reg) = regressor.filter(|_| slots.lips) {
        denoiser.lip_norm = reg.norm.clone();
    }
    let (lo, hi, jitter) = (config.min_window, config.max_window, config.position_jitter);
    denoiser.fit("face", seed, |rng| {
        let i = rng.random_range(0..takes.len());
        let take = &takes[i];
        let (start, len) = draw_window(take.frames(), lo, hi, rng);
        let offset = if jitter > 0 { rng.random_range(0..=jitter) } else { 0 };
        let x0 = take.face.frames().slice(s![start..start + len, ..]).to_owned();
        let cond = OwnedConditioning {
            audio: slots.audio.then(|| take.audio.slice(start, len)).transpose()?,
            lips: lips[i].as_ref().map(|l| l.slice(start, len)).transpose()?,
            guides: None,
        };
        Ok((x0, cond, offset))
    })?;
    Ok(FaceModel { variant, denoiser })
}

/// Face codes for `audio`: predicts lips (full variant) and runs guided reverse diffusion.
pub fn generate_face<T: Scalar, R: Rng + ?Sized>(
    audio: &AudioFeatures<T>,
    regressor: Option<&LipRegressor<T>>,
    model: &FaceModel<T>,
    scale: f64,
    rng: &mut R,
) -> Result<FaceSequence<T>> {
    let slots = model.variant.slots();
    let lips = if slots.lips {
        let reg = regressor.ok_or_else(|| Error::invalid("the full face model needs a lip regressor"))?;
        Some(reg.predict_lips(audio)?)
    } else {
        None
    };
    let cond = ConditioningBundle {
        audio: slots.audio.then_some(Slot::Given(audio)),
        lips: lips.as_ref().map(Slot::Given),
        guides: None,
    };
    let frames = model.denoiser.sample(&cond, audio.frames(), scale, rng)?;
    FaceSequence::new(frames)
}
