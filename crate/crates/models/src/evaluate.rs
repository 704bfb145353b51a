//! Evaluation of generators on a set of takes: FD_g / FD_k against the takes' ground truth, the
//! three diversity measures and lip errors, summarised as mean and standard deviation over seeds.
//!
//! Per seed, every take is cropped to `30·⌊T/30⌋` frames (optionally capped), each generator
//! produces `group_size` samples per take, and FD is computed between all pooled samples and the
//! pooled ground truth. Div_g and Div_k average over samples; Div_sample averages the per-take
//! variance across the group. Pose and face metrics are reported separately (`*_pose`,
//! `*_face`); when both exist the unsuffixed headline is their mean.

use rayon::prelude::*;
use std::collections::BTreeMap;

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::metrics::{
    div_geometric, div_kinetic, div_sample, fd_geometric, fd_kinetic, lip_errors, MetricSummary, SystemReport, KINETIC_WINDOW,
};
use dyadmotion_core::sequence::{FaceSequence, MotionSequence};
use dyadmotion_core::synth::{FaceLipCodec, LipKeypoints};
use dyadmotion_core::take::Take;
use dyadmotion_core::{Error, FrameSeq, Result, Scalar, GUIDE_STRIDE};
use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{knn_baseline, random_baseline, vq_only_motion, KNN_STRIDE};
use crate::body::{generate_body, generate_conversation_motion, BodyModel, ConversationModels, StageSeeds};
use crate::face::{generate_face, FaceModel, LipRegressor};
use crate::guide::{generate_guide_poses, GuideTransformer};
use crate::rvq::RvqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Samples per audio clip (Div_sample group size).
    pub group_size: usize,
    pub top_p: f64,
    pub guidance_scale: f64,
    /// Crop every take to at most this many frames (0 keeps full takes).
    pub max_frames: usize,
    /// Rest lip opening used to read lips back out of generated face codes, millimetres.
    pub lip_rest_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            group_size: 5,
            top_p: 0.9,
            guidance_scale: 2.0,
            max_frames: 600,
            lip_rest_mm: 1.0,
        }
    }
}

/// One generated sample for an audio clip.
pub struct Generated<T> {
    pub face: Option<FaceSequence<T>>,
    pub motion: MotionSequence<T>,
}

/// Anything that turns audio into motion (and possibly face codes).
pub trait Generator<T: Scalar> {
    fn generate(&self, audio: &AudioFeatures<T>, seed: u64) -> Result<Generated<T>>;
}

/// Random training windows.
pub struct RandomGenerator<'a, T> {
    pub train: &'a [Take<T>],
}

impl<T: Scalar> Generator<T> for RandomGenerator<'_, T> {
    fn generate(&self, audio: &AudioFeatures<T>, seed: u64) -> Result<Generated<T>> {
        let r = random_baseline(self.train, audio.frames(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Generated {
            face: Some(r.face),
            motion: r.motion,
        })
    }
}

/// Audio nearest neighbour in the training set; ignores the seed.
pub struct KnnGenerator<'a, T> {
    pub train: &'a [Take<T>],
}

impl<T: Scalar> Generator<T> for KnnGenerator<'_, T> {
    fn generate(&self, audio: &AudioFeatures<T>, _seed: u64) -> Result<Generated<T>> {
        let r = knn_baseline(audio, self.train, KNN_STRIDE)?;
        Ok(Generated {
            face: Some(r.face),
            motion: r.motion,
        })
    }
}

/// The full system, or an ablation when `body` is an ablated model.
pub struct PipelineGenerator<'a, T: Scalar> {
    pub models: &'a ConversationModels<T>,
    pub top_p: f64,
    pub guidance_scale: f64,
}

impl<T: Scalar> Generator<T> for PipelineGenerator<'_, T> {
    fn generate(&self, audio: &AudioFeatures<T>, seed: u64) -> Result<Generated<T>> {
        let c = generate_conversation_motion(audio, self.models, self.top_p, self.guidance_scale, StageSeeds::from_seed(seed))?;
        Ok(Generated {
            face: Some(c.face),
            motion: c.motion,
        })
    }
}

/// Body-only pipeline parts borrowed separately, so one face model and guide stack can be paired
/// with several body models.
pub struct BodyPipeline<'a, T: Scalar> {
    pub lip: Option<&'a LipRegressor<T>>,
    pub face: Option<&'a FaceModel<T>>,
    pub rvq: &'a RvqModel<T>,
    pub guide: &'a GuideTransformer<T>,
    pub body: &'a BodyModel<T>,
    pub top_p: f64,
    pub guidance_scale: f64,
}

impl<T: Scalar> Generator<T> for BodyPipeline<'_, T> {
    fn generate(&self, audio: &AudioFeatures<T>, seed: u64) -> Result<Generated<T>> {
        let seeds = StageSeeds::from_seed(seed);
        let k = audio.frames() / GUIDE_STRIDE;
        let audio = audio.slice(0, k.max(1) * GUIDE_STRIDE)?;
        let guides = if self.body.needs_guides() {
            Some(generate_guide_poses(&audio, self.guide, self.rvq, self.top_p, &mut ChaCha8Rng::seed_from_u64(seeds.guides))?)
        } else {
            None
        };
        let motion = generate_body(&audio, guides.as_ref(), self.body, self.guidance_scale, &mut ChaCha8Rng::seed_from_u64(seeds.body))?;
        let face = self
            .face
            .map(|f| generate_face(&audio, self.lip, f, self.guidance_scale, &mut ChaCha8Rng::seed_from_u64(seeds.face)))
            .transpose()?;
        Ok(Generated { face, motion })
    }
}

/// Per-frame tokens decoded without diffusion, optionally paired with a face model.
pub struct VqOnlyGenerator<'a, T: Scalar> {
    pub rvq: &'a RvqModel<T>,
    pub guide: &'a GuideTransformer<T>,
    pub lip: Option<&'a LipRegressor<T>>,
    pub face: Option<&'a FaceModel<T>>,
    pub top_p: f64,
    pub guidance_scale: f64,
}

impl<T: Scalar> Generator<T> for VqOnlyGenerator<'_, T> {
    fn generate(&self, audio: &AudioFeatures<T>, seed: u64) -> Result<Generated<T>> {
        let seeds = StageSeeds::from_seed(seed);
        let motion = vq_only_motion(audio, self.rvq, self.guide, self.top_p, &mut ChaCha8Rng::seed_from_u64(seeds.guides))?;
        let face = self
            .face
            .map(|f| generate_face(audio, self.lip, f, self.guidance_scale, &mut ChaCha8Rng::seed_from_u64(seeds.face)))
            .transpose()?;
        Ok(Generated { face, motion })
    }
}

/// Frames each take is evaluated on.
pub fn eval_frames<T: Scalar>(take: &Take<T>, max_frames: usize) -> usize {
    let cap = if max_frames == 0 { take.frames() } else { take.frames().min(max_frames) };
    cap / GUIDE_STRIDE * GUIDE_STRIDE
}

fn crop_takes<T: Scalar>(takes: &[Take<T>], max_frames: usize) -> Result<Vec<Take<T>>> {
    if takes.is_empty() {
        return Err(Error::invalid("evaluation needs at least one take"));
    }
    takes
        .iter()
        .map(|t| {
            let n = eval_frames(t, max_frames);
            if n == 0 {
                return Err(Error::TooShortForGuides {
                    frames: t.frames(),
                    needed: GUIDE_STRIDE,
                });
            }
            t.slice(0, n)
        })
        .collect()
}

/// Seed of sample `g` of take `i` under evaluation seed `seed`.
pub fn sample_seed(seed: u64, take: usize, g: usize) -> u64 {
    dyadmotion_core::synth::take_seed(seed ^ ((take as u64) << 32), g)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Default)]
struct SeedMetrics(BTreeMap<String, Vec<f64>>);

impl SeedMetrics {
    fn push(&mut self, name: &str, value: f64) {
        self.0.entry(name.to_string()).or_default().push(value);
    }

    fn into_report(self) -> SystemReport {
        SystemReport {
            metrics: self.0.into_iter().map(|(k, v)| (k, MetricSummary::from_values(&v))).collect(),
        }
    }
}

/// Static and kinetic FD plus diversity of one modality for one seed.
fn modality_metrics<T: Scalar>(
    out: &mut SeedMetrics,
    suffix: &str,
    generated: &[Vec<ArrayView2<'_, T>>],
    reference: &[ArrayView2<'_, T>],
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 2]> {
    let pooled: Vec<ArrayView2<'_, T>> = generated.iter().flatten().copied().collect();
    let fd_g = fd_geometric(&pooled, reference)?;
    out.push(&format!("fd_g_{suffix}"), fd_g);
    let long_enough = reference.iter().any(|r| r.nrows() > KINETIC_WINDOW);
    let fd_k = if long_enough { fd_kinetic(&pooled, reference)? } else { f64::NAN };
    if long_enough {
        out.push(&format!("fd_k_{suffix}"), fd_k);
    }
    let div_g: Vec<f64> = pooled.iter().map(|s| div_geometric(*s, rng)).collect::<Result<_>>()?;
    out.push(&format!("div_g_{suffix}"), mean(&div_g));
    let div_k: Vec<f64> = pooled.iter().map(|s| div_kinetic(*s)).collect::<Result<_>>()?;
    out.push(&format!("div_k_{suffix}"), mean(&div_k));
    if generated.iter().all(|g| g.len() >= 2) {
        let ds: Vec<f64> = generated.iter().map(|g| div_sample(g)).collect::<Result<_>>()?;
        out.push(&format!("div_sample_{suffix}"), mean(&ds));
    }
    Ok([fd_g, fd_k])
}

/// Evaluates `generator` on `takes`.
pub fn evaluate<T: Scalar, G: Generator<T> + Sync + ?Sized>(generator: &G, takes: &[Take<T>], config: &EvalConfig) -> Result<SystemReport> {
    if config.seeds.is_empty() || config.group_size == 0 {
        return Err(Error::invalid("evaluation needs seeds and a positive group size"));
    }
    let takes = crop_takes(takes, config.max_frames)?;
    let lip_vertices = takes[0].lips.vertex_count();
    let codec = FaceLipCodec::get(lip_vertices);
    let keypoints = LipKeypoints::for_ring(lip_vertices);
    let mut metrics = SeedMetrics::default();
    for &seed in &config.seeds {
        // Takes run in parallel; results are collected in take order, so the reduction is fixed.
        let groups: Vec<(Vec<MotionSequence<T>>, Vec<FaceSequence<T>>)> = takes
            .par_iter()
            .enumerate()
            .map(|(i, take)| {
                let mut m = Vec::with_capacity(config.group_size);
                let mut f = Vec::with_capacity(config.group_size);
                for g in 0..config.group_size {
                    let out = generator.generate(&take.audio, sample_seed(seed, i, g))?;
                    if out.motion.len() != take.frames() {
                        return Err(Error::shape(format!(
                            "generator produced {} frames for a {}-frame take",
                            out.motion.len(),
                            take.frames()
                        )));
                    }
                    m.push(out.motion);
                    f.extend(out.face);
                }
                Ok((m, f))
            })
            .collect::<Result<_>>()?;
        let (motions, faces): (Vec<_>, Vec<_>) = groups.into_iter().unzip();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen_pose: Vec<Vec<_>> = motions.iter().map(|g| g.iter().map(|m| m.frames()).collect()).collect();
        let ref_pose: Vec<_> = takes.iter().map(|t| t.motion.frames()).collect();
        let pose = modality_metrics(&mut metrics, "pose", &gen_pose, &ref_pose, &mut rng)?;
        let has_face = faces.iter().all(|f| f.len() == config.group_size);
        if has_face {
            let gen_face: Vec<Vec<_>> = faces.iter().map(|g| g.iter().map(|f| f.frames()).collect()).collect();
            let ref_face: Vec<_> = takes.iter().map(|t| t.face.frames()).collect();
            let face = modality_metrics(&mut metrics, "face", &gen_face, &ref_face, &mut rng)?;
            metrics.push("fd_g", 0.5 * (pose[0] + face[0]));
            if pose[1].is_finite() && face[1].is_finite() {
                metrics.push("fd_k", 0.5 * (pose[1] + face[1]));
            }
            let mut errs = [Vec::new(), Vec::new(), Vec::new()];
            for (take, group) in takes.iter().zip(&faces) {
                for face in group {
                    let lips = codec.lips_from_face(face, config.lip_rest_mm)?;
                    let e = lip_errors(&lips, &take.lips, &keypoints)?;
                    errs[0].push(e.horizontal);
                    errs[1].push(e.vertical);
                    errs[2].push(e.mesh);
                }
            }
            metrics.push("lip_horizontal_l2", mean(&errs[0]));
            metrics.push("lip_vertical_l2", mean(&errs[1]));
            metrics.push("lip_mesh_l2", mean(&errs[2]));
        }
    }
    Ok(metrics.into_report())
}

/// The ground-truth row: Div_g and Div_k of the takes themselves.
pub fn evaluate_ground_truth<T: Scalar>(takes: &[Take<T>], config: &EvalConfig) -> Result<SystemReport> {
    let takes = crop_takes(takes, config.max_frames)?;
    let mut metrics = SeedMetrics::default();
    for &seed in &config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (suffix, seqs) in [
            ("pose", takes.iter().map(|t| t.motion.frames()).collect::<Vec<_>>()),
            ("face", takes.iter().map(|t| t.face.frames()).collect()),
        ] {
            let dg: Vec<f64> = seqs.iter().map(|s| div_geometric(*s, &mut rng)).collect::<Result<_>>()?;
            let dk: Vec<f64> = seqs.iter().map(|s| div_kinetic(*s)).collect::<Result<_>>()?;
            metrics.push(&format!("div_g_{suffix}"), mean(&dg));
            metrics.push(&format!("div_k_{suffix}"), mean(&dk));
        }
    }
    Ok(metrics.into_report())
}
