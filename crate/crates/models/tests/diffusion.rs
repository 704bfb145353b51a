use std::cell::RefCell;

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::GuidePoseSequence;
use dyadmotion_core::Result;
use dyadmotion_models::denoiser::{Denoiser, StreamDims};
use dyadmotion_models::diffusion::{
    cfg_predict, draw_training_example, q_sample, reverse_sample, standard_normal, training_loss, ConditioningBundle, Slot, X0Model,
};
use dyadmotion_models::{DiffusionConfig, NoiseSchedule, SlotSet};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `x̂0 = a·x_τ + offset`, where the offset depends on whether audio is given.
struct Affine {
    a: f64,
    given: f64,
    null: f64,
    calls: RefCell<Vec<bool>>,
}

impl Affine {
    fn new(a: f64, given: f64, null: f64) -> Self {
        Self {
            a,
            given,
            null,
            calls: RefCell::new(Vec::new()),
        }
    }
}

impl X0Model<f64> for Affine {
    fn predict_x0(&self, x_t: ArrayView2<'_, f64>, _tau: usize, cond: &ConditioningBundle<'_, f64>) -> Result<Array2<f64>> {
        let given = cond.audio.is_some_and(|s| !s.is_null());
        self.calls.borrow_mut().push(given);
        let b = if given { self.given } else { self.null };
        Ok(x_t.mapv(|v| self.a * v + b))
    }
}

struct Constant(Array2<f64>);

impl X0Model<f64> for Constant {
    fn predict_x0(&self, _x_t: ArrayView2<'_, f64>, _tau: usize, _cond: &ConditioningBundle<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.0.clone())
    }
}

fn audio(frames: usize) -> AudioFeatures<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(frames as u64);
    let a = standard_normal(frames, 4, &mut rng);
    let b = standard_normal(frames, 4, &mut rng);
    AudioFeatures::from_streams(a.view(), b.view()).unwrap()
}

fn mean_square(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64
}

#[test]
fn forward_marginal_at_the_last_step_is_standard_normal() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Array2::<f64>::from_elem((10_000, 3), 2.0);
    let noise = standard_normal(10_000, 3, &mut rng);
    let x = q_sample(x0.view(), 1000, noise.view(), &schedule).unwrap();
    for col in x.columns() {
        let m = col.mean().unwrap();
        let v = col.var(0.0);
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((0.95..=1.05).contains(&v), "variance {v}");
    }
}

#[test]
fn q_sample_follows_the_closed_form() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0: Array2<f64> = standard_normal(5, 3, &mut rng);
    let eps: Array2<f64> = standard_normal(5, 3, &mut rng);
    assert_eq!(q_sample(x0.view(), 0, eps.view(), &schedule).unwrap(), x0);
    for tau in [1, 17, 500, 999, 1000] {
        let ab = schedule.alpha_bar(tau);
        let x = q_sample(x0.view(), tau, eps.view(), &schedule).unwrap();
        for ((&got, &a), &e) in x.iter().zip(x0.iter()).zip(eps.iter()) {
            assert!((got - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
        }
    }
    assert!(q_sample(x0.view(), 1001, eps.view(), &schedule).is_err());
    assert!(q_sample(x0.view(), 3, eps.slice(ndarray::s![..4, ..]), &schedule).is_err());
}

#[test]
fn cosine_schedule_decreases_to_nearly_zero() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    for t in 1..=1000 {
        assert!(schedule.alpha_bar(t) < schedule.alpha_bar(t - 1));
        assert!(schedule.alpha(t) > 0.0 && schedule.alpha(t) <= 1.0);
    }
    assert!(schedule.alpha_bar(1000) < 1e-4);
    // ᾱ_1 = cos²((1/1000 + s)/(1 + s)·π/2) / cos²(s/(1 + s)·π/2) with s = 0.008.
    let f = |t: f64| ((t / 1000.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    assert!((schedule.alpha_bar(1) - f(1.0) / f(0.0)).abs() < 1e-12);
}

#[test]
fn loss_of_a_zero_predictor_is_the_mean_square() {
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = standard_normal(12, 4, &mut rng);
    let zero = Constant(Array2::zeros((12, 4)));
    let loss = training_loss(&zero, x0.view(), &ConditioningBundle::empty(), &schedule, 0.1, &mut rng).unwrap();
    assert!((loss - mean_square(x0.view())).abs() < 1e-12);
}

#[test]
fn loss_of_the_identity_predictor_matches_the_drawn_noise() {
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = standard_normal(9, 2, &mut rng);
    let identity = Affine::new(1.0, 0.0, 0.0);
    let seed_rng = rng.clone();
    let loss = training_loss(&identity, x0.view(), &ConditioningBundle::empty(), &schedule, 0.0, &mut rng).unwrap();
    let ex = draw_training_example(x0.view(), &ConditioningBundle::empty(), &schedule, 0.0, &mut seed_rng.clone());
    // x_τ − x0 = (√ᾱ − 1)·x0 + √(1−ᾱ)·ε
    let ab = schedule.alpha_bar(ex.tau);
    let want: f64 = x0
        .iter()
        .zip(ex.noise.iter())
        .map(|(&x, &e)| ((ab.sqrt() - 1.0) * x + (1.0 - ab).sqrt() * e).powi(2))
        .sum::<f64>()
        / x0.len() as f64;
    assert!((loss - want).abs() < 1e-12);
}

#[test]
fn conditioning_dropout_rate_matches_p_drop() {
    let a = audio(4);
    let schedule = NoiseSchedule::cosine(10).unwrap();
    let cond = ConditioningBundle {
        audio: Some(Slot::Given(&a)),
        lips: None,
        guides: None,
    };
    let x0 = Array2::<f64>::zeros((4, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (p, lo, hi) in [(0.0, 0, 0), (1.0, 2000, 2000), (0.1, 150, 250)] {
        let dropped = (0..2000)
            .filter(|_| draw_training_example(x0.view(), &cond, &schedule, p, &mut rng).cond.audio.unwrap().is_null())
            .count();
        assert!((lo..=hi).contains(&dropped), "p={p}: {dropped} of 2000 dropped");
    }
}

#[test]
fn dropout_keeps_disabled_slots_disabled() {
    let a = audio(4);
    let cond = ConditioningBundle {
        audio: Some(Slot::Given(&a)),
        lips: None,
        guides: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let d = cond.dropped(0.5, &mut rng);
        assert!(d.lips.is_none() && d.guides.is_none());
    }
    assert!(!cond.nulled().has_data());
    assert_eq!(cond.nulled().slots(), cond.slots());
}

proptest! {
    #[test]
    fn guidance_is_the_linear_combination(a in -2.0f64..2.0, c in -3.0f64..3.0, u in -3.0f64..3.0, s in -1.0f64..5.0, seed in any::<u64>()) {
        let feats = audio(3);
        let cond = ConditioningBundle { audio: Some(Slot::Given(&feats)), lips: None, guides: None };
        let model = Affine::new(a, c, u);
        let x = standard_normal(3, 2, &mut ChaCha8Rng::seed_from_u64(seed));
        let got = cfg_predict(&model, x.view(), 5, &cond, s).unwrap();
        for (&g, &xv) in got.iter().zip(x.iter()) {
            let (pc, pu) = (a * xv + c, a * xv + u);
            prop_assert!((g - (pu + s * (pc - pu))).abs() < 1e-9);
        }
    }
}

#[test]
fn guidance_scale_one_is_the_conditional_pass_only() {
    let feats = audio(3);
    let cond = ConditioningBundle {
        audio: Some(Slot::Given(&feats)),
        lips: None,
        guides: None,
    };
    let model = Affine::new(0.7, 1.3, -0.4);
    let x = standard_normal(3, 2, &mut ChaCha8Rng::seed_from_u64(7));
    let got = cfg_predict(&model, x.view(), 5, &cond, 1.0).unwrap();
    assert_eq!(got, model.predict_x0(x.view(), 5, &cond).unwrap());
    model.calls.borrow_mut().clear();
    cfg_predict(&model, x.view(), 5, &cond, 1.0).unwrap();
    assert_eq!(*model.calls.borrow(), vec![true]);
    model.calls.borrow_mut().clear();
    let zero = cfg_predict(&model, x.view(), 5, &cond, 0.0).unwrap();
    assert_eq!(zero, model.predict_x0(x.view(), 5, &cond.nulled()).unwrap());
    assert_eq!(model.calls.borrow()[0], false);
}

#[test]
fn unconditional_bundles_are_evaluated_once() {
    let model = Affine::new(1.0, 5.0, 2.0);
    let x = Array2::<f64>::zeros((2, 2));
    let got = cfg_predict(&model, x.view(), 3, &ConditioningBundle::empty(), 3.0).unwrap();
    assert_eq!(model.calls.borrow().len(), 1);
    assert!(got.iter().all(|&v| v == 2.0));
}

#[test]
fn a_constant_model_is_a_fixed_point_of_sampling() {
    let schedule = NoiseSchedule::cosine(1000).unwrap();
    let target = standard_normal(6, 3, &mut ChaCha8Rng::seed_from_u64(8));
    let model = Constant(target.clone());
    let steps = schedule.sampling_steps(25);
    let out = reverse_sample(&model, &ConditioningBundle::empty(), &schedule, &steps, 2.0, (6, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(out, target);
}

#[test]
fn sampling_rejects_bad_step_lists() {
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let model = Constant(Array2::zeros((2, 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cond = ConditioningBundle::empty();
    assert!(reverse_sample(&model, &cond, &schedule, &[], 1.0, (2, 2), &mut rng).is_err());
    assert!(reverse_sample(&model, &cond, &schedule, &[5, 3], 1.0, (2, 2), &mut rng).is_err());
    assert!(reverse_sample(&model, &cond, &schedule, &[1, 101], 1.0, (2, 2), &mut rng).is_err());
}

#[test]
fn sampling_with_an_identity_model_returns_the_lowest_step_sample() {
    // With x̂0 = x_τ the sampler re-noises its own input, so the result is
    // √ᾱ_{τ1}·(…) + noise; check only that two seeds differ and one seed repeats.
    let schedule = NoiseSchedule::cosine(50).unwrap();
    let model = Affine::new(1.0, 0.0, 0.0);
    let steps = schedule.sampling_steps(10);
    let run = |seed| reverse_sample(&model, &ConditioningBundle::empty(), &schedule, &steps, 1.0, (4, 2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

fn tiny_config() -> DiffusionConfig {
    DiffusionConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        ffn: 32,
        diffusion_steps: 100,
        sample_steps: 5,
        ..Default::default()
    }
}

fn body_denoiser(slots: SlotSet) -> Denoiser<f64> {
    let dims = StreamDims {
        sample: 5,
        audio: 4,
        lips: 0,
        guides: 5,
    };
    Denoiser::new(tiny_config(), slots, dims, 3).unwrap()
}

#[test]
fn untrained_denoiser_loss_is_the_mean_square() {
    let model = body_denoiser(SlotSet {
        audio: true,
        lips: false,
        guides: true,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = standard_normal(60, 5, &mut rng);
    let a = audio(60);
    let g = GuidePoseSequence::with_stride(standard_normal(2, 5, &mut rng), 30).unwrap();
    let cond = ConditioningBundle {
        audio: Some(Slot::Given(&a)),
        lips: None,
        guides: Some(Slot::Given(&g)),
    };
    let loss = training_loss(&model, x0.view(), &cond, model.schedule(), 0.1, &mut rng).unwrap();
    assert!((loss - mean_square(x0.view())).abs() < 1e-12);
}

#[test]
fn denoiser_guidance_one_equals_the_conditional_pass() {
    let mut model = body_denoiser(SlotSet {
        audio: true,
        lips: false,
        guides: true,
    });
    // Perturb every weight (including the zero-initialised output layer) so predictions depend on
    // all inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = model.params_mut();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let noise = standard_normal(params.value(id).nrows(), params.value(id).ncols(), &mut rng);
        *params.value_mut(id) += &(noise * 0.05);
    }
    for i in 0..10 {
        let x = standard_normal(30 + i, 5, &mut rng);
        let a = audio(30 + i);
        let g = GuidePoseSequence::with_stride(standard_normal(1, 5, &mut rng), 30).unwrap();
        let cond = ConditioningBundle {
            audio: Some(Slot::Given(&a)),
            lips: None,
            guides: Some(Slot::Given(&g)),
        };
        let direct = model.predict_x0(x.view(), 1 + 9 * i, &cond).unwrap();
        let guided = cfg_predict(&model, x.view(), 1 + 9 * i, &cond, 1.0).unwrap();
        assert_eq!(direct, guided);
        let nulled = model.predict_x0(x.view(), 1 + 9 * i, &cond.nulled()).unwrap();
        assert_ne!(direct, nulled);
    }
}

#[test]
fn denoiser_rejects_mismatched_bundles() {
    let model = body_denoiser(SlotSet {
        audio: true,
        lips: false,
        guides: false,
    });
    let x = Array2::<f64>::zeros((30, 5));
    assert!(model.predict_x0(x.view(), 3, &ConditioningBundle::empty()).is_err());
    let short = audio(20);
    let cond = ConditioningBundle {
        audio: Some(Slot::Given(&short)),
        lips: None,
        guides: None,
    };
    assert!(model.predict_x0(x.view(), 3, &cond).is_err());
    assert!(model.predict_x0(Array2::<f64>::zeros((20, 4)).view(), 3, &cond).is_err());
}

#[test]
fn unconditional_denoiser_sampling_is_seeded() {
    let model = body_denoiser(SlotSet::NONE);
    let cond = ConditioningBundle::empty();
    let run = |seed| model.sample(&cond, 12, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(4), run(4));
    assert_eq!(run(4).dim(), (12, 5));
    assert!(model.sample(&cond, 0, 2.0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let dims = StreamDims {
        sample: 2,
        audio: 2,
        lips: 0,
        guides: 2,
    };
    let bad = [
        DiffusionConfig { heads: 3, ..tiny_config() },
        DiffusionConfig { min_window: 0, ..tiny_config() },
        DiffusionConfig { cond_drop_prob: 1.5, ..tiny_config() },
        DiffusionConfig { guide_band: 10, ..tiny_config() },
    ];
    for cfg in bad {
        assert!(Denoiser::<f32>::new(cfg, SlotSet::NONE, dims, 1).is_err());
    }
}
