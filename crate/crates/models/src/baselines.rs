//! Non-learned baselines (random training window, audio nearest neighbour) and the VQ-only
//! ablation that tokenizes every 30 fps frame and skips diffusion.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{FaceSequence, GuidePoseSequence, MotionSequence};
use dyadmotion_core::take::Take;
use dyadmotion_core::{Error, Result, Scalar};
use ndarray::Axis;
use rand::Rng;

use crate::guide::{sample_guide_tokens, GuideTransformer};
use crate::rvq::{RvqModel, TokenSequence};

/// A segment copied out of the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved<T> {
    pub take: usize,
    pub start: usize,
    pub face: FaceSequence<T>,
    pub motion: MotionSequence<T>,
}

fn retrieve<T: Scalar>(takes: &[Take<T>], take: usize, start: usize, len: usize) -> Result<Retrieved<T>> {
    let t = &takes[take];
    Ok(Retrieved {
        take,
        start,
        face: t.face.slice(start, len)?,
        motion: t.motion.slice(start, len)?,
    })
}

/// A uniformly chosen take (among those with at least `frames` frames) and a uniformly placed
/// window of `frames` frames within it.
pub fn random_baseline<T: Scalar, R: Rng + ?Sized>(train: &[Take<T>], frames: usize, rng: &mut R) -> Result<Retrieved<T>> {
    if frames == 0 {
        return Err(Error::invalid("cannot retrieve an empty window"));
    }
    let eligible: Vec<usize> = (0..train.len()).filter(|&i| train[i].frames() >= frames).collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!("no training take has {frames} frames")));
    }
    let take = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(0..=train[take].frames() - frames);
    retrieve(train, take, start, frames)
}

/// Window spacing of the nearest-neighbour search, in frames.
pub const KNN_STRIDE: usize = 5;

/// Mean over frames of the L2 distance between the two-stream feature vectors of `query` and the
/// window of `take` starting at `start`.
pub fn window_distance<T: Scalar>(query: &AudioFeatures<T>, take: &AudioFeatures<T>, start: usize) -> f64 {
    let len = query.frames();
    (0..len)
        .map(|t| {
            let mut d = 0.0;
            for s in 0..2 {
                let q = query.stream(s).index_axis_move(Axis(0), t);
                let r = take.stream(s).index_axis_move(Axis(0), start + t);
                d += q.iter().zip(r.iter()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>();
            }
            d.sqrt()
        })
        .sum::<f64>()
        / len as f64
}

/// Slides a query-length window over every training take with stride `stride` and returns the
/// motion and face of the window closest to `audio`. Ties go to the earliest take, then the
/// earliest start.
pub fn knn_baseline<T: Scalar>(audio: &AudioFeatures<T>, train: &[Take<T>], stride: usize) -> Result<Retrieved<T>> {
    let len = audio.frames();
    if stride == 0 {
        return Err(Error::invalid("knn stride must be positive"));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (i, take) in train.iter().enumerate() {
        if take.frames() < len {
            continue;
        }
        if take.audio.feature_dim() != audio.feature_dim() {
            return Err(Error::shape(format!("take {} audio width differs from the query", take.id)));
        }
        for start in (0..=take.frames() - len).step_by(stride) {
            let d = window_distance(audio, &take.audio, start);
            if best.is_none_or(|(b, _, _)| d < b) {
                best = Some((d, i, start));
            }
        }
    }
    let (_, take, start) = best.ok_or_else(|| Error::invalid(format!("no training take has {len} frames")))?;
    retrieve(train, take, start, len)
}

/// Per-frame motion from a residual VQ and transformer trained at stride 1. Long inputs are
/// generated in independent chunks of at most `max_tokens / N` frames.
pub fn vq_only_motion<T: Scalar, R: Rng + ?Sized>(
    audio: &AudioFeatures<T>,
    rvq: &RvqModel<T>,
    guide: &GuideTransformer<T>,
    top_p: f64,
    rng: &mut R,
) -> Result<MotionSequence<T>> {
    if rvq.config.stride != 1 || guide.space.stride != 1 {
        return Err(Error::invalid("the VQ-only baseline needs models trained on every frame (stride 1)"));
    }
    let chunk = guide.config.max_tokens / guide.space.depth;
    if chunk == 0 {
        return Err(Error::invalid("transformer token budget is below one frame"));
    }
    let frames = audio.frames();
    if frames == 0 {
        return Err(Error::AudioTooShort { frames, needed: 1 });
    }
    let mut tokens = Vec::with_capacity(frames * guide.space.depth);
    let mut start = 0;
    while start < frames {
        let len = chunk.min(frames - start);
        let part = sample_guide_tokens(&audio.slice(start, len)?, guide, rvq, top_p, rng)?;
        tokens.extend_from_slice(part.tokens());
        start += len;
    }
    let poses: GuidePoseSequence<T> = rvq.decode(&TokenSequence::new(tokens, guide.space.depth)?)?;
    MotionSequence::at_30fps(poses.into_poses())
}
