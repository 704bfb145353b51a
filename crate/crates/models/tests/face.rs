use dyadmotion_core::audio::{extract_features, FrontEnd, Waveform};
use dyadmotion_core::metrics::div_sample;
use dyadmotion_core::sequence::{FrameSeq, LipSequence};
use dyadmotion_core::synth::{generate_corpus, generate_dyad_detailed, LipKeypoints, StyleParams, TurnPattern};
use dyadmotion_core::take::Take;
use dyadmotion_models::face::{generate_face, train_face_model, train_lip_regressor, FaceModel, LipRegressor};
use dyadmotion_models::{DiffusionConfig, FaceVariant, LipConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lip_config() -> LipConfig {
    LipConfig {
        hidden: 32,
        steps: 1000,
        batch: 4,
        window: 90,
        adam: dyadmotion_nn::AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn tiny_face_config() -> DiffusionConfig {
    DiffusionConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        ffn: 32,
        steps: 5,
        sample_steps: 4,
        min_window: 30,
        max_window: 60,
        ..Default::default()
    }
}

/// Vertical opening minus the 10 mm lip height, per frame.
fn openings(lips: &LipSequence<f32>) -> Vec<f64> {
    let k = LipKeypoints::for_ring(lips.dim() / 3);
    let f = lips.frames();
    (0..f.nrows())
        .map(|t| (f[[t, 3 * k.top + 1]] - f[[t, 3 * k.bottom + 1]]) as f64 - 10.0)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Trained {
    model: LipRegressor<f32>,
    test: Vec<Take<f32>>,
}

fn trained_regressor() -> Trained {
    let style = StyleParams::default();
    let train = generate_corpus::<f32>(11, 16, 20.0, &style).unwrap();
    let test = generate_corpus::<f32>(12, 2, 12.0, &style).unwrap();
    Trained {
        model: train_lip_regressor(&train, &lip_config(), 4).unwrap(),
        test,
    }
}

#[test]
fn lip_regressor_recovers_the_planted_signal() {
    let Trained { model, test } = trained_regressor();

    // Held-out MSE against the per-vertex variance of the ground truth.
    let (mut err, mut var, mut n) = (0.0, 0.0, 0usize);
    let all: Vec<_> = test.iter().map(|t| t.lips.frames().mapv(f64::from)).collect();
    let rows: usize = all.iter().map(|a| a.nrows()).sum();
    let mean_row = all.iter().fold(ndarray::Array1::<f64>::zeros(all[0].ncols()), |acc, a| acc + a.sum_axis(ndarray::Axis(0))) / rows as f64;
    for (take, truth) in test.iter().zip(&all) {
        let pred = model.predict_lips(&take.audio).unwrap().frames().mapv(f64::from);
        err += (&pred - truth).mapv(|d| d * d).sum();
        var += (truth - &mean_row).mapv(|d| d * d).sum();
        n += truth.len();
    }
    let (mse, variance) = (err / n as f64, var / n as f64);
    assert!(mse * 5.0 <= variance, "test MSE {mse} against lip variance {variance}");

    // Features are standardised per take, so silence is only meaningful next to speech: keep the
    // first half of a speaking take and replace the rest with the recording noise floor.
    let speaking = StyleParams {
        turns: TurnPattern::SelfOnly,
        pause_prob: 0.0,
        ..StyleParams::default()
    };
    let dyad = generate_dyad_detailed::<f32>(5, 12.0, &speaking).unwrap();
    let floor = generate_dyad_detailed::<f32>(
        6,
        12.0,
        &StyleParams {
            turns: TurnPattern::Silent,
            ..StyleParams::default()
        },
    )
    .unwrap();
    let half = dyad.waveform_self.samples.len() / 2;
    let mut quiet = dyad.waveform_self.samples.clone();
    quiet[half..].copy_from_slice(&floor.waveform_self.samples[half..]);
    let audio = extract_features::<f32>(&Waveform::new(quiet, dyad.waveform_self.rate), &dyad.waveform_other, &FrontEnd::default()).unwrap();
    let open = openings(&model.predict_lips(&audio).unwrap());
    // Skip frames whose receptive field still reaches back across the cut.
    let silent = mean(&open[open.len() / 2 + 15..]);
    let rest = StyleParams::default().lip_rest_mm;
    assert!((silent - rest).abs() < 0.5, "silent opening {silent} vs rest {rest}");

    // Speech whose loudness ramps up opens the mouth progressively wider.
    let len = dyad.waveform_self.samples.len();
    let ramped: Vec<f32> = dyad
        .waveform_self
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| s * (0.05 + 0.95 * i as f32 / len as f32))
        .collect();
    let audio = extract_features::<f32>(&Waveform::new(ramped, dyad.waveform_self.rate), &dyad.waveform_other, &FrontEnd::default()).unwrap();
    let open = openings(&model.predict_lips(&audio).unwrap());
    let third = open.len() / 3;
    let (a, b, c) = (mean(&open[..third]), mean(&open[third..2 * third]), mean(&open[2 * third..]));
    assert!(a < b && b < c, "openings by third: {a} {b} {c}");
}

#[test]
fn lip_regressor_is_deterministic_and_round_trips() {
    let style = StyleParams::default();
    let takes = generate_corpus::<f32>(3, 2, 8.0, &style).unwrap();
    let config = LipConfig {
        steps: 10,
        ..lip_config()
    };
    let a = train_lip_regressor(&takes, &config, 1).unwrap();
    let b = train_lip_regressor(&takes, &config, 1).unwrap();
    assert_eq!(a.info.losses, b.info.losses);
    let lips = a.predict_lips(&takes[0].audio).unwrap();
    assert_eq!(lips.frames().dim(), (takes[0].frames(), 3 * style.lip_vertices));
    assert_eq!(b.predict_lips(&takes[0].audio).unwrap(), lips);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let loaded = LipRegressor::<f32>::load(dir.path()).unwrap();
    assert_eq!(loaded.config, a.config);
    assert_eq!(loaded.predict_lips(&takes[0].audio).unwrap(), lips);
    assert!(FaceModel::<f32>::load(dir.path()).is_err());
}

#[test]
fn lip_regressor_rejects_mismatched_audio() {
    let takes = generate_corpus::<f32>(3, 1, 8.0, &StyleParams::default()).unwrap();
    let model = LipRegressor::<f32>::new(lip_config(), 40, 60, 1).unwrap();
    assert!(model.predict_lips(&takes[0].audio).is_err());
    assert!(LipRegressor::<f32>::new(lip_config(), 80, 61, 1).is_err());
}

#[test]
fn face_samples_differ_across_seeds_and_round_trip() {
    let takes = generate_corpus::<f32>(8, 2, 8.0, &StyleParams::default()).unwrap();
    let lip = train_lip_regressor(&takes, &LipConfig { steps: 5, ..lip_config() }, 1).unwrap();
    let model = train_face_model(&takes, Some(&lip), &tiny_face_config(), FaceVariant::Full, 2).unwrap();
    assert!(model.needs_lips());
    let audio = takes[0].audio.slice(0, 60).unwrap();
    let sample = |seed| generate_face(&audio, Some(&lip), &model, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (a, b) = (sample(1), sample(2));
    assert_eq!(a.frames().dim(), (60, takes[0].face.dim()));
    assert_eq!(sample(1), a);
    let spread = div_sample(&[a.frames(), b.frames()]).unwrap();
    assert!(spread > 0.0);

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = FaceModel::<f32>::load(dir.path()).unwrap();
    assert_eq!(loaded.variant, FaceVariant::Full);
    let again = generate_face(&audio, Some(&lip), &loaded, 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for (x, y) in again.frames().iter().zip(a.frames().iter()) {
        assert!((x - y).abs() < 1e-4);
    }
}

#[test]
fn full_face_model_needs_a_regressor() {
    let takes = generate_corpus::<f32>(8, 1, 8.0, &StyleParams::default()).unwrap();
    assert!(train_face_model(&takes, None, &tiny_face_config(), FaceVariant::Full, 2).is_err());
    let model = train_face_model(&takes, None, &tiny_face_config(), FaceVariant::NoLips, 2).unwrap();
    assert!(!model.needs_lips());
    let audio = takes[0].audio.slice(0, 30).unwrap();
    assert!(generate_face(&audio, None, &model, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    assert!("no_lips".parse::<FaceVariant>().unwrap() == FaceVariant::NoLips);
    assert!("lips".parse::<FaceVariant>().is_err());
}
