//! DDPM machinery shared by the face and body models: cosine noise schedule, forward corruption,
//! the x0-prediction objective with conditioning dropout, classifier-free guidance and ancestral
//! sampling that re-noises each x0 estimate.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{GuidePoseSequence, LipSequence};
use dyadmotion_core::{Error, Result, Scalar};
use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Offset `s` of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_Ṫ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("noise schedule needs at least two steps"));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Schedule from explicit cumulative levels; `alpha_bar[0]` must be 1 and the rest strictly
    /// decreasing inside (0, 1).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.first() != Some(&1.0) || alpha_bar.len() < 3 {
            return Err(Error::invalid("alpha_bar must start at 1 and have at least two steps"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar[1..].iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing and positive"));
        }
        Ok(Self { alpha_bar })
    }

    /// `Ṫ`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `ᾱ_τ` for `0 ≤ τ ≤ Ṫ`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau]
    }

    /// Per-step `α_τ = ᾱ_τ / ᾱ_{τ−1}` for `1 ≤ τ ≤ Ṫ`.
    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha_bar[tau] / self.alpha_bar[tau - 1]
    }

    fn check(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::invalid(format!("diffusion step {tau} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Ascending sampling steps `τ_i = 1 + round((i−1)(Ṫ−1)/(S−1))`, so the first is 1 and the last
    /// is `Ṫ`. `count` is clamped to `[2, Ṫ]`.
    pub fn sampling_steps(&self, count: usize) -> Vec<usize> {
        let t = self.steps();
        let s = count.clamp(2, t);
        let mut out: Vec<usize> = (0..s)
            .map(|i| 1 + ((i * (t - 1)) as f64 / (s - 1) as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

/// One conditioning input: present data or the explicit null marker.
#[derive(Debug)]
pub enum Slot<'a, X> {
    Null,
    Given(&'a X),
}

impl<X> Clone for Slot<'_, X> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<X> Copy for Slot<'_, X> {}

impl<'a, X> Slot<'a, X> {
    pub fn given(&self) -> Option<&'a X> {
        match self {
            Slot::Null => None,
            Slot::Given(x) => Some(x),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Slot::Null)
    }
}

/// Which conditioning streams a model has at all. A disabled slot has no layers and is never
/// consulted, which is different from a null slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSet {
    pub audio: bool,
    pub lips: bool,
    pub guides: bool,
}

impl SlotSet {
    pub const NONE: SlotSet = SlotSet {
        audio: false,
        lips: false,
        guides: false,
    };

    pub fn count(&self) -> usize {
        [self.audio, self.lips, self.guides].iter().filter(|&&b| b).count()
    }
}

/// Conditioning passed to a denoiser. `None` marks a slot the model does not have.
#[derive(Debug)]
pub struct ConditioningBundle<'a, T> {
    pub audio: Option<Slot<'a, AudioFeatures<T>>>,
    pub lips: Option<Slot<'a, LipSequence<T>>>,
    pub guides: Option<Slot<'a, GuidePoseSequence<T>>>,
}

impl<T> Clone for ConditioningBundle<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for ConditioningBundle<'_, T> {}

impl<'a, T> ConditioningBundle<'a, T> {
    pub fn empty() -> Self {
        Self {
            audio: None,
            lips: None,
            guides: None,
        }
    }

    pub fn slots(&self) -> SlotSet {
        SlotSet {
            audio: self.audio.is_some(),
            lips: self.lips.is_some(),
            guides: self.guides.is_some(),
        }
    }

    /// Every present slot replaced by the null marker.
    pub fn nulled(&self) -> Self {
        Self {
            audio: self.audio.map(|_| Slot::Null),
            lips: self.lips.map(|_| Slot::Null),
            guides: self.guides.map(|_| Slot::Null),
        }
    }

    /// True when at least one slot carries data.
    pub fn has_data(&self) -> bool {
        self.audio.is_some_and(|s| !s.is_null()) || self.lips.is_some_and(|s| !s.is_null()) || self.guides.is_some_and(|s| !s.is_null())
    }

    /// Independently nulls each present slot with probability `p_drop`. One uniform draw is
    /// consumed per present slot, in the order audio, lips, guides.
    pub fn dropped<R: Rng + ?Sized>(&self, p_drop: f64, rng: &mut R) -> Self {
        fn drop<S: Copy, R: Rng + ?Sized>(slot: Option<S>, null: S, p: f64, rng: &mut R) -> Option<S> {
            slot.map(|s| if rng.random::<f64>() < p { null } else { s })
        }
        Self {
            audio: drop(self.audio, Slot::Null, p_drop, rng),
            lips: drop(self.lips, Slot::Null, p_drop, rng),
            guides: drop(self.guides, Slot::Null, p_drop, rng),
        }
    }
}

/// A network predicting the clean sample from a noisy one.
pub trait X0Model<T: Scalar> {
    /// Prediction of `x_0` for `x_τ` (same shape as `x_τ`).
    fn predict_x0(&self, x_t: ArrayView2<'_, T>, tau: usize, cond: &ConditioningBundle<'_, T>) -> Result<Array2<T>>;
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(StandardNormal.sample(rng)))
}

/// `x_τ = √ᾱ_τ·x0 + √(1−ᾱ_τ)·ε`. `τ = 0` is accepted and returns `x0`.
pub fn q_sample<T: Scalar>(x0: ArrayView2<'_, T>, tau: usize, noise: ArrayView2<'_, T>, schedule: &NoiseSchedule) -> Result<Array2<T>> {
    if tau > schedule.steps() {
        return Err(Error::invalid(format!("diffusion step {tau} outside 1..={}", schedule.steps())));
    }
    if x0.dim() != noise.dim() {
        return Err(Error::shape("noise shape differs from the sample"));
    }
    Ok(mix(x0, noise, schedule.alpha_bar(tau)))
}

fn mix<T: Scalar>(x0: ArrayView2<'_, T>, noise: ArrayView2<'_, T>, alpha_bar: f64) -> Array2<T> {
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    let mut out = Array2::zeros(x0.dim());
    Zip::from(&mut out).and(x0).and(noise).for_each(|o, &x, &e| *o = a * x + b * e);
    out
}

/// Inputs of one training step: `τ ~ U{1..Ṫ}`, `ε ~ N(0, I)`, the corrupted sample and the
/// conditioning after dropout.
pub struct TrainingExample<'a, T> {
    pub tau: usize,
    pub noise: Array2<T>,
    pub x_t: Array2<T>,
    pub cond: ConditioningBundle<'a, T>,
}

pub fn draw_training_example<'a, T: Scalar, R: Rng + ?Sized>(
    x0: ArrayView2<'_, T>,
    cond: &ConditioningBundle<'a, T>,
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> TrainingExample<'a, T> {
    let tau = rng.random_range(1..=schedule.steps());
    let noise = standard_normal(x0.nrows(), x0.ncols(), rng);
    let x_t = mix(x0, noise.view(), schedule.alpha_bar(tau));
    let cond = cond.dropped(p_drop, rng);
    TrainingExample { tau, noise, x_t, cond }
}

/// Mean squared error between `x0` and the model's prediction on one random training example.
pub fn training_loss<T: Scalar, M: X0Model<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: ArrayView2<'_, T>,
    cond: &ConditioningBundle<'_, T>,
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<f64> {
    let ex = draw_training_example(x0, cond, schedule, p_drop, rng);
    let pred = model.predict_x0(ex.x_t.view(), ex.tau, &ex.cond)?;
    if pred.dim() != x0.dim() {
        return Err(Error::shape("model prediction has the wrong shape"));
    }
    let n = x0.len().max(1) as f64;
    Ok(Zip::from(&pred).and(x0).fold(0.0, |acc, &p, &x| acc + (p - x).as_f64().powi(2)) / n)
}

/// `x̂0 = u + s·(c − u)` from the conditional pass `c` and the all-null pass `u`.
///
/// `s = 1` returns the conditional pass itself and `s = 0` the unconditional one, without
/// evaluating the other; a bundle with no data is evaluated once.
pub fn cfg_predict<T: Scalar, M: X0Model<T> + ?Sized>(
    model: &M,
    x_t: ArrayView2<'_, T>,
    tau: usize,
    cond: &ConditioningBundle<'_, T>,
    scale: f64,
) -> Result<Array2<T>> {
    if scale == 1.0 || !cond.has_data() {
        return model.predict_x0(x_t, tau, cond);
    }
    let uncond = model.predict_x0(x_t, tau, &cond.nulled())?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let c = model.predict_x0(x_t, tau, cond)?;
    let s = T::lit(scale);
    Ok(&uncond + &((&c - &uncond) * s))
}

/// Ancestral sampling over the ascending step list `steps` (last entry `Ṫ`).
///
/// Starts from `x ~ N(0, I)` at `Ṫ`; at each step predicts `x̂0` with guidance, then re-noises it to
/// the next lower step with fresh noise. Returns the `x̂0` predicted at the lowest step.
pub fn reverse_sample<T: Scalar, M: X0Model<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &ConditioningBundle<'_, T>,
    schedule: &NoiseSchedule,
    steps: &[usize],
    scale: f64,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<Array2<T>> {
    let (&top, rest) = steps.split_last().ok_or_else(|| Error::invalid("empty sampling schedule"))?;
    for &tau in steps {
        schedule.check(tau)?;
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sampling steps must be strictly ascending"));
    }
    let mut x = standard_normal(shape.0, shape.1, rng);
    let mut tau = top;
    for &next in rest.iter().rev() {
        let x0 = cfg_predict(model, x.view(), tau, cond, scale)?;
        let noise = standard_normal(shape.0, shape.1, rng);
        x = mix(x0.view(), noise.view(), schedule.alpha_bar(next));
        tau = next;
    }
    cfg_predict(model, x.view(), tau, cond, scale)
}
