use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{FaceSequence, LipSequence, MotionSequence};
use dyadmotion_core::take::{Role, Take};
use dyadmotion_core::FrameSeq;
use dyadmotion_models::baselines::{knn_baseline, random_baseline, vq_only_motion, window_distance, KNN_STRIDE};
use dyadmotion_models::guide::{token_space, GuideTransformer};
use dyadmotion_models::rvq::RvqModel;
use dyadmotion_models::{GuideConfig, RvqConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// A take with random audio whose face and motion carry its index and frame number, so any
/// retrieved window can be traced back to its source.
fn traceable_take(index: usize, frames: usize, audio_offset: f64, rng: &mut ChaCha8Rng) -> Take<f64> {
    let audio = Array3::from_shape_simple_fn((2, 4, frames), || audio_offset + 0.1 * rng.sample::<f64, _>(StandardNormal));
    let motion = Array2::from_shape_fn((frames, 3), |(t, j)| (index * 10_000 + t) as f64 + j as f64 * 0.1);
    let face = Array2::from_shape_fn((frames, 2), |(t, j)| -((index * 10_000 + t) as f64) - j as f64);
    Take {
        id: format!("t{index}"),
        audio: AudioFeatures::new(audio).unwrap(),
        face: FaceSequence::new(face).unwrap(),
        motion: MotionSequence::at_30fps(motion).unwrap(),
        lips: LipSequence::new(Array2::zeros((frames, 3))).unwrap(),
        roles: vec![Role::Unknown; frames],
    }
}

fn corpus(lengths: &[usize], seed: u64) -> Vec<Take<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths.iter().enumerate().map(|(i, &n)| traceable_take(i, n, 0.0, &mut rng)).collect()
}

#[test]
fn random_windows_are_verbatim_training_subsequences() {
    let train = corpus(&[90, 120, 200], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let r = random_baseline(&train, 60, &mut rng).unwrap();
        let source = &train[r.take];
        assert!(r.start + 60 <= source.frames());
        assert_eq!(r.motion, source.motion.slice(r.start, 60).unwrap());
        assert_eq!(r.face, source.face.slice(r.start, 60).unwrap());
    }
    let a = random_baseline(&train, 60, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = random_baseline(&train, 60, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_take_choice_is_uniform_over_eligible_takes() {
    // The 50-frame take is too short for 60-frame windows and must never be chosen.
    let train = corpus(&[90, 50, 120, 200, 61], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 1000;
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[random_baseline(&train, 60, &mut rng).unwrap().take] += 1;
    }
    assert_eq!(counts[1], 0);
    let eligible = [counts[0], counts[2], counts[3], counts[4]];
    let expected = draws as f64 / 4.0;
    let chi2: f64 = eligible.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
    assert!(chi2 < critical, "chi2 {chi2} over {critical}: {counts:?}");
}

#[test]
fn random_baseline_errors() {
    let train = corpus(&[40], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(random_baseline(&train, 60, &mut rng).is_err());
    assert!(random_baseline(&train, 0, &mut rng).is_err());
    assert!(random_baseline::<f64, _>(&[], 10, &mut rng).is_err());
}

#[test]
fn knn_returns_the_query_window_itself() {
    let train = corpus(&[150, 200, 180], 7);
    for (take, start) in [(1, 35), (2, 0), (0, 90)] {
        assert_eq!(start % KNN_STRIDE, 0);
        let query = train[take].audio.slice(start, 60).unwrap();
        assert_eq!(window_distance(&query, &train[take].audio, start), 0.0);
        let r = knn_baseline(&query, &train, KNN_STRIDE).unwrap();
        assert_eq!((r.take, r.start), (take, start));
        assert_eq!(r.motion, train[take].motion.slice(start, 60).unwrap());
        assert_eq!(r.face, train[take].face.slice(start, 60).unwrap());
    }
}

#[test]
fn knn_window_distance_matches_direct_formula() {
    let train = corpus(&[50, 50], 8);
    let query = train[1].audio.slice(5, 20).unwrap();
    let mut want = 0.0;
    for t in 0..20 {
        let mut sq = 0.0;
        for s in 0..2 {
            for f in 0..4 {
                sq += (query.data()[[s, f, t]] - train[0].audio.data()[[s, f, 10 + t]]).powi(2);
            }
        }
        want += sq.sqrt();
    }
    want /= 20.0;
    assert!((window_distance(&query, &train[0].audio, 10) - want).abs() < 1e-12);
}

#[test]
fn knn_never_crosses_planted_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train: Vec<_> = (0..6).map(|i| traceable_take(i, 120, if i % 2 == 0 { -3.0 } else { 3.0 }, &mut rng)).collect();
    for q in 0..20 {
        let side = if q % 2 == 0 { -3.0 } else { 3.0 };
        let query = traceable_take(100 + q, 45, side, &mut rng).audio;
        let r = knn_baseline(&query, &train, KNN_STRIDE).unwrap();
        assert_eq!(r.take % 2, q % 2, "query {q} retrieved take {}", r.take);
    }
}

#[test]
fn knn_is_deterministic_and_prefers_the_earliest_tie() {
    let mut train = corpus(&[100, 100], 11);
    train[1].audio = train[0].audio.clone();
    let query = train[0].audio.slice(20, 30).unwrap();
    let a = knn_baseline(&query, &train, KNN_STRIDE).unwrap();
    assert_eq!((a.take, a.start), (0, 20));
    assert_eq!(knn_baseline(&query, &train, KNN_STRIDE).unwrap(), a);
    assert!(knn_baseline(&query, &train, 0).is_err());
    let long = train[0].audio.clone();
    let short = corpus(&[50], 1);
    assert!(knn_baseline(&long, &short, KNN_STRIDE).is_err());
}

#[test]
fn vq_only_emits_one_pose_per_frame_without_diffusion() {
    let pose_dim = 6;
    let rvq_config = RvqConfig {
        codebook_size: 16,
        embedding_dim: 8,
        depth: 2,
        hidden: 16,
        stride: 1,
        ..Default::default()
    };
    let rvq = RvqModel::<f64>::new(rvq_config, pose_dim, 1).unwrap();
    let guide_config = GuideConfig {
        width: 16,
        heads: 2,
        self_layers: 1,
        cross_layers: 1,
        ffn: 32,
        max_tokens: 40,
        ..Default::default()
    };
    let guide = GuideTransformer::<f64>::new(guide_config, token_space(&rvq, 4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let audio = traceable_take(0, 47, 0.0, &mut rng).audio;
    // 20 frames per chunk under a 40-token budget at depth 2.
    let motion = vq_only_motion(&audio, &rvq, &guide, 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(motion.fps(), 30);
    assert_eq!(motion.frames().dim(), (47, pose_dim));
    let again = vq_only_motion(&audio, &rvq, &guide, 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(again, motion);

    let strided = RvqModel::<f64>::new(RvqConfig { stride: 30, ..rvq.config.clone() }, pose_dim, 1).unwrap();
    assert!(vq_only_motion(&audio, &strided, &guide, 0.9, &mut rng).is_err());
}
