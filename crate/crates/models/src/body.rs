//! Body diffusion model conditioned on audio and 1 fps guide poses, and the full audio-to-motion
//! pipeline.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{subsample_guide_poses, FaceSequence, GuidePoseSequence, MotionSequence};
use dyadmotion_core::take::Take;
use dyadmotion_core::{Error, FrameSeq, Result, Scalar, GUIDE_STRIDE};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::denoiser::{draw_window, Denoiser, DiffusionConfig, OwnedConditioning, StreamDims};
use crate::diffusion::{ConditioningBundle, Slot, SlotSet};
use crate::face::{generate_face, FaceModel, LipRegressor};
use crate::guide::{generate_guide_poses, GuideTransformer};
use crate::norm::Normalizer;
use crate::rvq::RvqModel;

pub const MODEL_KIND: &str = "body";

/// Conditioning of the body model; the ablations remove a slot entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyVariant {
    Full,
    NoAudio,
    NoGuides,
    Uncond,
}

impl BodyVariant {
    pub const ALL: [BodyVariant; 4] = [BodyVariant::Full, BodyVariant::NoAudio, BodyVariant::NoGuides, BodyVariant::Uncond];

    pub fn slots(self) -> SlotSet {
        SlotSet {
            audio: matches!(self, BodyVariant::Full | BodyVariant::NoGuides),
            lips: false,
            guides: matches!(self, BodyVariant::Full | BodyVariant::NoAudio),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyVariant::Full => "full",
            BodyVariant::NoAudio => "no_audio",
            BodyVariant::NoGuides => "no_guides",
            BodyVariant::Uncond => "uncond",
        }
    }
}

impl std::str::FromStr for BodyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown body variant {s:?} (full, no_audio, no_guides, uncond)")))
    }
}

pub struct BodyModel<T: Scalar> {
    pub variant: BodyVariant,
    pub denoiser: Denoiser<T>,
}

impl<T: Scalar> BodyModel<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.denoiser.save_as(dir, MODEL_KIND, &self.variant)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (denoiser, extra) = Denoiser::load_as(dir, MODEL_KIND)?;
        Ok(Self {
            variant: serde_json::from_value(extra)?,
            denoiser,
        })
    }

    pub fn needs_guides(&self) -> bool {
        self.variant.slots().guides
    }
}

/// Trains with ground-truth guide poses subsampled from each training window.
pub fn train_body_model<T: Scalar>(takes: &[Take<T>], config: &DiffusionConfig, variant: BodyVariant, seed: u64) -> Result<BodyModel<T>> {
    let first = takes.first().ok_or_else(|| Error::invalid("training corpus is empty"))?;
    for t in takes {
        t.validate()?;
        if t.motion.dim() != first.motion.dim() || t.audio.feature_dim() != first.audio.feature_dim() {
            return Err(Error::shape(format!("take {} differs in pose or audio width", t.id)));
        }
    }
    let slots = variant.slots();
    if slots.guides && config.min_window < GUIDE_STRIDE {
        return Err(Error::invalid(format!("guide-conditioned training needs windows of at least {GUIDE_STRIDE} frames")));
    }
    let pose_dim = first.motion.dim();
    let dims = StreamDims {
        sample: pose_dim,
        audio: first.audio.feature_dim(),
        lips: 0,
        guides: pose_dim,
    };
    let mut denoiser = Denoiser::new(config.clone(), slots, dims, seed)?;
    let views: Vec<_> = takes.iter().map(|t| t.motion.frames()).collect();
    denoiser.sample_norm = Normalizer::fit(&views, config.std_floor)?;
    denoiser.guide_norm = denoiser.sample_norm.clone();
    let (lo, hi, jitter) = (config.min_window, config.max_window, config.position_jitter);
    denoiser.fit("body", seed, |rng| {
        let take = &takes[rng.random_range(0..takes.len())];
        let (start, len) = draw_window(take.frames(), lo, hi, rng);
        let offset = if jitter > 0 { rng.random_range(0..=jitter) } else { 0 };
        let motion = take.motion.slice(start, len)?;
        let cond = OwnedConditioning {
            audio: slots.audio.then(|| take.audio.slice(start, len)).transpose()?,
            lips: None,
            guides: slots.guides.then(|| subsample_guide_poses(&motion)).transpose()?,
        };
        Ok((motion.frames().to_owned(), cond, offset))
    })?;
    Ok(BodyModel { variant, denoiser })
}

/// Frames generated for `audio` and optional guides: `30·K`, where `K` is the guide count, which
/// must equal `⌊T_audio/30⌋`.
fn output_frames<T: Scalar>(audio: &AudioFeatures<T>, guides: Option<&GuidePoseSequence<T>>) -> Result<usize> {
    let k = audio.frames() / GUIDE_STRIDE;
    if k == 0 {
        return Err(Error::AudioTooShort {
            frames: audio.frames(),
            needed: GUIDE_STRIDE,
        });
    }
    if let Some(g) = guides {
        if g.stride() != GUIDE_STRIDE || g.count() != k {
            return Err(Error::shape(format!(
                "{} guide poses (stride {}) do not span {} audio frames ({k} expected)",
                g.count(),
                g.stride(),
                audio.frames()
            )));
        }
    }
    Ok(k * GUIDE_STRIDE)
}

/// 30 fps motion of length `30·K` for `audio` and guide poses. Variants without a guide slot
/// ignore `guides`.
pub fn generate_body<T: Scalar, R: Rng + ?Sized>(
    audio: &AudioFeatures<T>,
    guides: Option<&GuidePoseSequence<T>>,
    model: &BodyModel<T>,
    scale: f64,
    rng: &mut R,
) -> Result<MotionSequence<T>> {
    let slots = model.variant.slots();
    let guides = if slots.guides {
        Some(guides.ok_or_else(|| Error::invalid(format!("the {} body model needs guide poses", model.variant.name())))?)
    } else {
        None
    };
    let frames = output_frames(audio, guides)?;
    let audio = audio.slice(0, frames)?;
    let cond = ConditioningBundle {
        audio: slots.audio.then_some(Slot::Given(&audio)),
        lips: None,
        guides: guides.map(Slot::Given),
    };
    MotionSequence::at_30fps(model.denoiser.sample(&cond, frames, scale, rng)?)
}

/// The five trained models of the full system.
pub struct ConversationModels<T: Scalar> {
    pub lip: Option<LipRegressor<T>>,
    pub face: FaceModel<T>,
    pub rvq: RvqModel<T>,
    pub guide: GuideTransformer<T>,
    pub body: BodyModel<T>,
}

/// Seeds of the three sampling stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub guides: u64,
    pub body: u64,
    pub face: u64,
}

impl StageSeeds {
    /// Independent stage seeds derived from one seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            guides: rng.random(),
            body: rng.random(),
            face: rng.random(),
        }
    }
}

/// Generated conversation output; both tracks have `30·⌊T/30⌋` frames.
pub struct Conversation<T> {
    pub face: FaceSequence<T>,
    pub motion: MotionSequence<T>,
    pub guides: Option<GuidePoseSequence<T>>,
}

/// Audio to face codes and body motion: samples guide poses, infills 30 fps motion by diffusion
/// and generates the face.
pub fn generate_conversation_motion<T: Scalar>(
    audio: &AudioFeatures<T>,
    models: &ConversationModels<T>,
    top_p: f64,
    scale: f64,
    seeds: StageSeeds,
) -> Result<Conversation<T>> {
    let k = audio.frames() / GUIDE_STRIDE;
    if k == 0 {
        return Err(Error::AudioTooShort {
            frames: audio.frames(),
            needed: GUIDE_STRIDE,
        });
    }
    let audio = audio.slice(0, k * GUIDE_STRIDE)?;
    let guides = if models.body.needs_guides() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.guides);
        Some(generate_guide_poses(&audio, &models.guide, &models.rvq, top_p, &mut rng)?)
    } else {
        None
    };
    let motion = generate_body(&audio, guides.as_ref(), &models.body, scale, &mut ChaCha8Rng::seed_from_u64(seeds.body))?;
    let face = generate_face(&audio, models.lip.as_ref(), &models.face, scale, &mut ChaCha8Rng::seed_from_u64(seeds.face))?;
    Ok(Conversation { face, motion, guides })
}

/// Ground-truth guide poses for a take, trimmed to the `⌊T/30⌋` poses.
pub fn ground_truth_guides<T: Scalar>(take: &Take<T>) -> Result<GuidePoseSequence<T>> {
    let k = take.frames() / GUIDE_STRIDE;
    let motion = MotionSequence::at_30fps(take.motion.frames().slice(s![..k * GUIDE_STRIDE, ..]).to_owned())?;
    subsample_guide_poses(&motion)
}
