//! Learned components: residual VQ over guide poses, the audio-conditioned guide transformer, the
//! face and body diffusion pipelines, the non-learned baselines and the evaluation driver.

pub mod baselines;
pub mod body;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod evaluate;
pub mod face;
pub mod guide;
pub mod norm;
pub mod rvq;

pub use checkpoint::{LossLog, Manifest, CHECKPOINT_VERSION};
pub use norm::Normalizer;
pub use body::{BodyVariant, StageSeeds};
pub use denoiser::DiffusionConfig;
pub use diffusion::{NoiseSchedule, SlotSet};
pub use evaluate::EvalConfig;
pub use face::{FaceVariant, LipConfig};
pub use guide::GuideConfig;
pub use rvq::{quantize_residual, train_rvq, RvqConfig, TokenSequence};

/// Seed, step count and logged losses of a trained model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainInfo {
    pub seed: u64,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl TrainInfo {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }
}

pub type RvqModel = rvq::RvqModel<f32>;
pub type GuideTransformer = guide::GuideTransformer<f32>;
pub type LipRegressor = face::LipRegressor<f32>;
pub type FaceModel = face::FaceModel<f32>;
pub type BodyModel = body::BodyModel<f32>;
pub type Denoiser = denoiser::Denoiser<f32>;
pub type ConversationModels = body::ConversationModels<f32>;
