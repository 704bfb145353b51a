//! Data types, synthetic corpus, audio features and metrics for dyadic conversational motion.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix `f32`,
//! which is what the models and command-line tools use.

pub mod arrayfile;
pub mod audio;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod scalar;
pub mod sequence;
pub mod skeleton;
pub mod synth;
pub mod take;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use sequence::{FrameSeq, GUIDE_STRIDE, MOTION_FPS};
pub use skeleton::Skeleton;

pub type MotionSequence = sequence::MotionSequence<f32>;
pub type FaceSequence = sequence::FaceSequence<f32>;
pub type LipSequence = sequence::LipSequence<f32>;
pub type GuidePoseSequence = sequence::GuidePoseSequence<f32>;
pub type AudioFeatures = audio::AudioFeatures<f32>;
pub type Take = take::Take<f32>;
