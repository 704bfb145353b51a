//! Reproducible synthetic dyadic conversations with planted audio→motion structure.
//!
//! Planted relations, all driven by the self speaker's loudness envelope `e(t)`:
//!
//! * lip opening = rest + gain · (lightly smoothed `e`) + small noise;
//! * each self phrase triggers one gesture burst: a smooth excursion toward one of a fixed set of arm
//!   prototypes, held for the phrase and released after it;
//! * beat motion on head and wrists follows `e` frame by frame;
//! * while listening the pose stays near a persona-specific posture with small noise, plus occasional
//!   nods after the partner's phrases;
//! * the persona (voice pitch and timbre) sets the posture offset and gesture scale, so the audio
//!   carries take-level style information.
//!
//! Face expression codes embed the lip geometry through a fixed orthonormal basis, so lip vertices
//! can be read back out of any face code with [`FaceLipCodec::lips_from_face`].

use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{extract_features, AudioFeatures, FrontEnd, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{FaceSequence, LipSequence, MotionSequence, FACE_DIM, MOTION_FPS};
use crate::skeleton::{RotationAxis, Skeleton};
use crate::take::{Role, Take};

pub const MIN_DURATION_S: f64 = 8.0;
const FPS: f64 = MOTION_FPS as f64;
const GESTURE_PROTOTYPES: usize = 8;
const EXPRESSION_DIM: usize = 8;
/// Scale between lip displacement in millimetres and face-code units.
const LIP_CODE_SCALE: f64 = 5.0;
const BASIS_SEED: u64 = 0x5eed_face_0b0d_1e5;

/// Who holds the floor over a take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnPattern {
    /// Turns alternate between the two speakers, with occasional mutual pauses.
    Alternating,
    /// Only the rendered participant speaks.
    SelfOnly,
    /// Only the partner speaks; the rendered participant listens throughout.
    OtherOnly,
    /// Nobody speaks.
    Silent,
}

/// Generator knobs. Defaults give a balanced conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleParams {
    pub sample_rate: u32,
    pub turns: TurnPattern,
    /// Turn length range, seconds.
    pub turn_s: (f64, f64),
    /// Probability of a mutual pause between turns.
    pub pause_prob: f64,
    /// Peak gesture excursion, radians.
    pub gesture_amplitude: f64,
    /// Lip opening per unit loudness, millimetres.
    pub lip_gain_mm: f64,
    /// Lip opening at rest, millimetres.
    pub lip_rest_mm: f64,
    /// Std of per-DOF pose noise, radians.
    pub pose_noise: f64,
    /// Number of lip vertices `d_l`.
    pub lip_vertices: usize,
    /// Filterbank width `d_a`.
    pub feature_dim: usize,
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            turns: TurnPattern::Alternating,
            turn_s: (2.0, 4.5),
            pause_prob: 0.25,
            gesture_amplitude: 0.6,
            lip_gain_mm: 12.0,
            lip_rest_mm: 1.0,
            pose_noise: 0.006,
            lip_vertices: 20,
            feature_dim: crate::audio::DEFAULT_FEATURE_DIM,
        }
    }
}

/// Indices of the lip keypoints used for opening measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LipKeypoints {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl LipKeypoints {
    /// Keypoints of the elliptical lip ring: vertex `i` sits at angle `2πi/d_l`.
    pub fn for_ring(vertices: usize) -> Self {
        Self {
            right: 0,
            top: vertices / 4,
            left: vertices / 2,
            bottom: 3 * vertices / 4,
        }
    }
}

/// A generated take together with the raw material that produced it.
pub struct GeneratedDyad<T> {
    pub take: Take<T>,
    pub waveform_self: Waveform,
    pub waveform_other: Waveform,
    /// Planted self loudness per frame.
    pub self_energy: Vec<f64>,
    /// Vertical lip opening per frame, millimetres.
    pub lip_opening: Vec<f64>,
    pub persona: [f64; 2],
}

#[derive(Clone, Copy, Debug)]
struct Phrase {
    start: f64,
    end: f64,
    gain: f64,
    syllable_hz: f64,
    phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Floor {
    Own,
    Partner,
    Nobody,
}

/// Fixed mapping between lip geometry and face codes, shared by every take.
pub struct FaceLipCodec {
    lip_basis: Array2<f64>,
    expr_basis: Array2<f64>,
    vertices: usize,
}

impl FaceLipCodec {
    fn build(vertices: usize) -> Self {
        let lip_dims = 3 * vertices;
        let cols = lip_dims + EXPRESSION_DIM;
        assert!(cols <= FACE_DIM, "too many lip vertices for the face code");
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED ^ vertices as u64);
        let mut q = Array2::<f64>::zeros((FACE_DIM, cols));
        for c in 0..cols {
            let mut v: Array1<f64> = (0..FACE_DIM).map(|_| rng.sample(StandardNormal)).collect();
            for prev in 0..c {
                let p = q.column(prev).to_owned();
                let d = v.dot(&p);
                v.scaled_add(-d, &p);
            }
            let n = v.dot(&v).sqrt();
            q.column_mut(c).assign(&(v / n));
        }
        Self {
            lip_basis: q.slice(ndarray::s![.., ..lip_dims]).to_owned(),
            expr_basis: q.slice(ndarray::s![.., lip_dims..]).to_owned(),
            vertices,
        }
    }

    /// Codec for `vertices` lip vertices (cached per vertex count).
    pub fn get(vertices: usize) -> &'static FaceLipCodec {
        static CACHE: OnceLock<std::sync::Mutex<Vec<&'static FaceLipCodec>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().expect("codec cache poisoned");
        if let Some(c) = guard.iter().find(|c| c.vertices == vertices) {
            return c;
        }
        let c: &'static FaceLipCodec = Box::leak(Box::new(Self::build(vertices)));
        guard.push(c);
        c
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    /// Rest lip ring, `3·d_l` values in millimetres.
    pub fn rest_lips(&self, rest_opening_mm: f64) -> Array1<f64> {
        lip_ring(self.vertices, 50.0, rest_opening_mm)
    }

    fn encode(&self, lip_frame: &Array1<f64>, rest: &Array1<f64>, expression: &Array1<f64>) -> Array1<f64> {
        let disp = (lip_frame - rest) / LIP_CODE_SCALE;
        self.lip_basis.dot(&disp) + self.expr_basis.dot(expression)
    }

    /// Reads lip vertices back out of face codes.
    pub fn lips_from_face<T: Scalar>(&self, face: &FaceSequence<T>, rest_opening_mm: f64) -> Result<LipSequence<T>> {
        use crate::sequence::FrameSeq;
        let f = face.frames().mapv(|v| v.as_f64());
        let rest = self.rest_lips(rest_opening_mm);
        let disp = f.dot(&self.lip_basis) * LIP_CODE_SCALE;
        let lips = &disp + &rest.insert_axis(ndarray::Axis(0));
        LipSequence::new(lips.mapv(T::lit))
    }
}

/// Elliptical ring of `vertices` points: width `width_mm`, lip height 10 mm plus `opening_mm`.
fn lip_ring(vertices: usize, width_mm: f64, opening_mm: f64) -> Array1<f64> {
    let height = 10.0 + opening_mm;
    let mut out = Array1::zeros(3 * vertices);
    for i in 0..vertices {
        let th = 2.0 * PI * i as f64 / vertices as f64;
        out[3 * i] = 0.5 * width_mm * th.cos();
        out[3 * i + 1] = 0.5 * height * th.sin();
        out[3 * i + 2] = -3.0 * th.sin().powi(2);
    }
    out
}

struct MotionRig {
    dofs: usize,
    prototypes: Vec<Array1<f64>>,
    posture: [Array1<f64>; 2],
    head_pitch: usize,
    neck_pitch: usize,
    wrist_beats: Vec<usize>,
    spine_pitch: usize,
}

impl MotionRig {
    fn new(skeleton: &Skeleton) -> Self {
        let dofs = skeleton.dof_count();
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED.rotate_left(17));
        let arm = skeleton.dofs_where(|n| {
            ["clavicle", "shoulder", "elbow", "forearm", "wrist"]
                .iter()
                .any(|k| n.ends_with(k))
        });
        let fingers = skeleton.dofs_where(|n| {
            ["thumb", "index", "middle", "ring", "pinky"]
                .iter()
                .any(|k| n.contains(k))
        });
        let upper = skeleton.dofs_where(|n| n.starts_with("spine") || n.starts_with("neck") || n == "head");
        let elbows: Vec<usize> = ["l_elbow", "r_elbow"]
            .iter()
            .filter_map(|j| skeleton.dof_index(j, RotationAxis::Pitch))
            .collect();
        let prototypes = (0..GESTURE_PROTOTYPES)
            .map(|g| {
                let mut v = Array1::zeros(dofs);
                for &d in &arm {
                    v[d] = rng.random_range(-1.0..1.0);
                }
                for &d in &fingers {
                    v[d] = rng.random_range(-0.6..0.6);
                }
                // One- or two-handed: odd prototypes keep the right arm quiet.
                if g % 2 == 1 {
                    for d in skeleton.dofs_where(|n| n.starts_with("r_") && !n.contains("hip") && !n.contains("knee") && !n.contains("ankle") && !n.contains("toe")) {
                        v[d] *= 0.15;
                    }
                }
                for &d in &elbows {
                    v[d] = -rng.random_range(0.5..1.3);
                }
                v
            })
            .collect();
        let posture = [0usize, 1].map(|_| {
            let mut v = Array1::zeros(dofs);
            for &d in upper.iter().chain(&arm) {
                v[d] = rng.random_range(-1.0..1.0);
            }
            v
        });
        let pick = |j: &str, a| skeleton.dof_index(j, a).unwrap_or(0);
        Self {
            dofs,
            prototypes,
            posture,
            head_pitch: pick("head", RotationAxis::Pitch),
            neck_pitch: pick("neck2", RotationAxis::Pitch),
            wrist_beats: ["l_wrist", "r_wrist"]
                .iter()
                .filter_map(|j| skeleton.dof_index(j, RotationAxis::Pitch))
                .collect(),
            spine_pitch: pick("spine2", RotationAxis::Pitch),
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn plan_floor(rng: &mut ChaCha8Rng, style: &StyleParams, duration: f64) -> Vec<(f64, f64, Floor)> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut speaker = if rng.random_bool(0.5) { Floor::Own } else { Floor::Partner };
    while t < duration {
        let len = rng.random_range(style.turn_s.0..=style.turn_s.1);
        let who = match style.turns {
            TurnPattern::Alternating => speaker,
            TurnPattern::SelfOnly => Floor::Own,
            TurnPattern::OtherOnly => Floor::Partner,
            TurnPattern::Silent => Floor::Nobody,
        };
        out.push((t, (t + len).min(duration), who));
        t += len;
        if style.turns == TurnPattern::Alternating && rng.random_bool(style.pause_prob) && t < duration {
            let gap = rng.random_range(0.5..1.5);
            out.push((t, (t + gap).min(duration), Floor::Nobody));
            t += gap;
        }
        speaker = if speaker == Floor::Own { Floor::Partner } else { Floor::Own };
    }
    out
}

fn phrases_in(rng: &mut ChaCha8Rng, start: f64, end: f64) -> Vec<Phrase> {
    let mut out = Vec::new();
    let mut t = start + rng.random_range(0.05..0.25);
    while t < end - 0.3 {
        let len = rng.random_range(0.8..2.0f64).min(end - t);
        out.push(Phrase {
            start: t,
            end: t + len,
            gain: rng.random_range(0.6..1.0),
            syllable_hz: rng.random_range(3.5..5.5),
            phase: rng.random_range(0.0..PI),
        });
        t += len + rng.random_range(0.15..0.45);
    }
    out
}

/// Loudness envelope at time `s` (seconds).
fn envelope_at(phrases: &[Phrase], s: f64) -> f64 {
    phrases
        .iter()
        .filter(|p| s >= p.start && s < p.end)
        .map(|p| {
            let ramp = ((s - p.start) / 0.05).min((p.end - s) / 0.05).min(1.0);
            let syl = (PI * p.syllable_hz * (s - p.start) + p.phase).sin().powi(2);
            p.gain * ramp * (0.35 + 0.65 * syl)
        })
        .sum()
}

fn synth_voice(rng: &mut ChaCha8Rng, env: &[f64], rate: u32, f0: f64, brightness: f64) -> Vec<f32> {
    let n = env.len();
    let harmonics = 12;
    let norm: f64 = (1..=harmonics).map(|h| (h as f64).powf(-brightness)).sum();
    let noise = Normal::new(0.0, 1e-3).expect("valid std");
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for (i, &e) in env.iter().enumerate() {
        let s = i as f64 / rate as f64;
        let f = f0 * (1.0 + 0.03 * (2.0 * PI * 0.5 * s).sin());
        phase = (phase + 2.0 * PI * f / rate as f64) % (2.0 * PI * 1000.0);
        let mut v = 0.0;
        if e > 1e-6 {
            for h in 1..=harmonics {
                v += (h as f64).powf(-brightness) * (h as f64 * phase).sin();
            }
            v *= 0.4 * e / norm;
        }
        out.push((v + noise.sample(rng)) as f32);
    }
    out
}

struct Ou {
    state: Vec<f64>,
    decay: f64,
    drive: f64,
}

impl Ou {
    fn new(dims: usize, std: f64, tau_s: f64) -> Self {
        let decay = (-1.0 / (tau_s * FPS)).exp();
        Self {
            state: vec![0.0; dims],
            decay,
            drive: std * (1.0 - decay * decay).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> &[f64] {
        for v in &mut self.state {
            let z: f64 = rng.sample(StandardNormal);
            *v = self.decay * *v + self.drive * z;
        }
        &self.state
    }
}

/// Generates one take of `duration_s` seconds. Deterministic in `seed`.
pub fn generate_dyad<T: Scalar>(seed: u64, duration_s: f64, style: &StyleParams) -> Result<Take<T>> {
    generate_dyad_detailed(seed, duration_s, style).map(|g| g.take)
}

/// As [`generate_dyad`], also returning the waveforms and planted signals.
pub fn generate_dyad_detailed<T: Scalar>(seed: u64, duration_s: f64, style: &StyleParams) -> Result<GeneratedDyad<T>> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::invalid(format!(
            "take duration {duration_s} s is below the {MIN_DURATION_S} s minimum"
        )));
    }
    if style.lip_vertices < 4 || 3 * style.lip_vertices + EXPRESSION_DIM > FACE_DIM {
        return Err(Error::invalid(format!("unsupported lip vertex count {}", style.lip_vertices)));
    }
    let skeleton = Skeleton::desk();
    let rig = MotionRig::new(&skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (duration_s * FPS + 1e-9).floor() as usize;
    let rate = style.sample_rate;
    let samples = (frames as f64 / FPS * rate as f64).round() as usize;

    let persona = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let f0_self = 100.0 + 50.0 * (persona[0] + 1.0);
    let bright_self = 1.0 + 0.5 * (persona[1] + 1.0);
    let f0_other = rng.random_range(100.0..220.0);
    let bright_other = rng.random_range(1.0..2.0);

    let floor = plan_floor(&mut rng, style, duration_s);
    let mut own = Vec::new();
    let mut partner = Vec::new();
    for &(a, b, who) in &floor {
        match who {
            Floor::Own => own.extend(phrases_in(&mut rng, a, b)),
            Floor::Partner => partner.extend(phrases_in(&mut rng, a, b)),
            Floor::Nobody => {}
        }
    }

    let env_samples = |phrases: &[Phrase]| -> Vec<f64> {
        (0..samples).map(|i| envelope_at(phrases, i as f64 / rate as f64)).collect()
    };
    let env_self_s = env_samples(&own);
    let env_other_s = env_samples(&partner);
    let waveform_self = Waveform::new(synth_voice(&mut rng, &env_self_s, rate, f0_self, bright_self), rate);
    let waveform_other = Waveform::new(synth_voice(&mut rng, &env_other_s, rate, f0_other, bright_other), rate);

    // Frame-level loudness: mean envelope over each frame's samples.
    let per_frame = |env: &[f64]| -> Vec<f64> {
        (0..frames)
            .map(|t| {
                let a = (t as f64 / FPS * rate as f64).round() as usize;
                let b = (((t + 1) as f64 / FPS * rate as f64).round() as usize).min(env.len()).max(a + 1);
                env[a..b].iter().sum::<f64>() / (b - a) as f64
            })
            .collect()
    };
    let energy = per_frame(&env_self_s);

    let roles: Vec<Role> = (0..frames)
        .map(|t| {
            let s = (t as f64 + 0.5) / FPS;
            let who = floor
                .iter()
                .find(|(a, b, _)| s >= *a && s < *b)
                .map(|f| f.2)
                .unwrap_or(Floor::Nobody);
            match who {
                Floor::Own => Role::Speaking,
                Floor::Partner => Role::Listening,
                Floor::Nobody => Role::Silent,
            }
        })
        .collect();

    // Lips.
    let codec = FaceLipCodec::get(style.lip_vertices);
    let rest_lips = codec.rest_lips(style.lip_rest_mm);
    let lip_noise = Normal::new(0.0, 0.12).expect("valid std");
    // Slow width drift the audio cannot explain; kept small so lips stay mostly audio-determined.
    let mut smile = Ou::new(1, 0.5, 3.0);
    let mut smoothed = 0.0;
    let mut lips = Array2::<f64>::zeros((frames, 3 * style.lip_vertices));
    let mut opening = Vec::with_capacity(frames);
    for t in 0..frames {
        smoothed = 0.6 * energy[t] + 0.4 * smoothed;
        let o = style.lip_rest_mm + style.lip_gain_mm * smoothed + lip_noise.sample(&mut rng);
        let width = 50.0 + smile.step(&mut rng)[0] - 0.3 * (o - style.lip_rest_mm);
        opening.push(o);
        lips.row_mut(t).assign(&lip_ring(style.lip_vertices, width, o));
    }

    // Face codes.
    let mut expr = Ou::new(EXPRESSION_DIM, 0.6, 1.5);
    let code_noise = Normal::new(0.0, 0.02).expect("valid std");
    let mut face = Array2::<f64>::zeros((frames, FACE_DIM));
    for t in 0..frames {
        let mut e: Array1<f64> = Array1::from(expr.step(&mut rng).to_vec());
        e[0] += 0.5 * persona[0];
        e[1] += 0.5 * persona[1];
        match roles[t] {
            Role::Listening => e[2] += 0.6,
            Role::Speaking => e[3] += 0.8 * energy[t],
            _ => {}
        }
        let code = codec.encode(&lips.row(t).to_owned(), &rest_lips, &e);
        for (dst, c) in face.row_mut(t).iter_mut().zip(code.iter()) {
            *dst = c + code_noise.sample(&mut rng);
        }
    }

    // Body.
    let posture = &rig.posture[0] * (0.15 * persona[0]) + &rig.posture[1] * (0.15 * persona[1]);
    let gesture_scale = 1.0 + 0.35 * persona[1];
    let gestures: Vec<(Phrase, usize, f64)> = own
        .iter()
        .map(|p| {
            let g = rng.random_range(0..GESTURE_PROTOTYPES);
            let amp = style.gesture_amplitude * gesture_scale * rng.random_range(0.7..1.1);
            (*p, g, amp)
        })
        .collect();
    let nods: Vec<f64> = partner
        .iter()
        .filter(|_| rng.random_bool(0.5))
        .map(|p| p.end)
        .collect();
    let mut noise = Ou::new(rig.dofs, style.pose_noise, 0.3);
    let mut motion = Array2::<f64>::zeros((frames, rig.dofs));
    for t in 0..frames {
        let s = t as f64 / FPS;
        let mut pose = posture.clone();
        for (d, n) in noise.step(&mut rng).iter().enumerate() {
            pose[d] += n;
        }
        pose[rig.spine_pitch] += 0.01 * (2.0 * PI * 0.25 * s).sin();
        for (p, g, amp) in &gestures {
            let rise = smoothstep((s - p.start) / 0.35);
            let fall = 1.0 - smoothstep((s - p.end) / 0.4);
            let w = rise * fall;
            if w > 0.0 {
                pose.scaled_add(amp * w, &rig.prototypes[*g]);
            }
        }
        if roles[t] == Role::Speaking {
            pose[rig.head_pitch] += 0.08 * energy[t];
            for &d in &rig.wrist_beats {
                pose[d] += 0.15 * energy[t];
            }
        }
        for &end in &nods {
            let x = (s - end) / 0.6;
            if (0.0..1.0).contains(&x) {
                pose[rig.neck_pitch] += 0.1 * (PI * x).sin();
            }
        }
        motion.row_mut(t).assign(&pose);
    }

    let front = FrontEnd {
        bands: style.feature_dim,
        ..FrontEnd::default()
    };
    let audio: AudioFeatures<T> = extract_features(&waveform_self, &waveform_other, &front)?;
    debug_assert_eq!(audio.frames(), frames);
    let take = Take {
        id: format!("take_{seed:016x}"),
        audio,
        face: FaceSequence::new(face.mapv(T::lit))?,
        motion: MotionSequence::at_30fps(motion.mapv(T::lit))?,
        lips: LipSequence::new(lips.mapv(T::lit))?,
        roles,
    };
    Ok(GeneratedDyad {
        take,
        waveform_self,
        waveform_other,
        self_energy: energy,
        lip_opening: opening,
        persona,
    })
}

/// Seed of take `index` in a corpus with `master_seed`.
pub fn take_seed(master_seed: u64, index: usize) -> u64 {
    // splitmix64
    let mut z = master_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` takes regenerable from `(master_seed, count)`; ids are `take_0000`, `take_0001`, ...
pub fn generate_corpus<T: Scalar>(master_seed: u64, count: usize, duration_s: f64, style: &StyleParams) -> Result<Vec<Take<T>>> {
    (0..count)
        .map(|i| {
            let mut take = generate_dyad(take_seed(master_seed, i), duration_s, style)?;
            take.id = format!("take_{i:04}");
            Ok(take)
        })
        .collect()
}
