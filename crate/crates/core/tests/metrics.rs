use dyadmotion_core::metrics::{div_geometric, div_kinetic, div_sample, frechet_distance, lip_errors, DIV_G_PAIRS};
use dyadmotion_core::sequence::LipSequence;
use dyadmotion_core::synth::LipKeypoints;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `m` points whose sample mean is exactly `mean` and whose unbiased sample covariance is exactly
/// `diag(std²)`: centred random columns are orthonormalised and rescaled.
fn exact_diagonal_sample(m: usize, mean: &[f64], std: &[f64], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = mean.len();
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut v: Array1<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mu = v.mean().unwrap();
        v -= mu;
        for c in &cols {
            let p = v.dot(c);
            v.scaled_add(-p, c);
        }
        let n = v.dot(&v).sqrt();
        cols.push(v / n);
    }
    let scale = ((m - 1) as f64).sqrt();
    Array2::from_shape_fn((m, d), |(i, j)| mean[j] + scale * std[j] * cols[j][i])
}

#[test]
fn diagonal_gaussians_match_the_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let d = rng.random_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mu_a, mu_b) = (draw(&mut rng, -2.0, 2.0), draw(&mut rng, -2.0, 2.0));
        let (sd_a, sd_b) = (draw(&mut rng, 0.2, 3.0), draw(&mut rng, 0.2, 3.0));
        let a = exact_diagonal_sample(rng.random_range(40..80), &mu_a, &sd_a, &mut rng);
        let b = exact_diagonal_sample(rng.random_range(40..80), &mu_b, &sd_b, &mut rng);
        let want: f64 = (0..d).map(|j| (mu_a[j] - mu_b[j]).powi(2) + (sd_a[j] - sd_b[j]).powi(2)).sum();
        let got = frechet_distance(a.view(), b.view()).unwrap();
        assert!((got - want).abs() <= 1e-6 * want, "d={d}: {got} vs {want}");
        assert!(frechet_distance(a.view(), a.view()).unwrap().abs() < 1e-8);
    }
}

#[test]
fn div_g_converges_to_the_exhaustive_pair_mean() {
    // Two poses at distance 1, alternating: a fraction of the distinct pairs are cross pairs.
    let t = 11;
    let x: Array2<f64> = Array2::from_shape_fn((t, 2), |(i, j)| if j == 0 && i % 2 == 1 { 1.0 } else { 0.0 });
    let mut total = 0.0f64;
    let mut pairs = 0;
    for i in 0..t {
        for j in i + 1..t {
            total += (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
            pairs += 1;
        }
    }
    let exhaustive = total / pairs as f64;
    assert!((exhaustive - 30.0 / 55.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let runs = 4000;
    let mean = (0..runs).map(|_| div_geometric(x.view(), &mut rng).unwrap()).sum::<f64>() / runs as f64;
    // Standard error of a 30-pair mean of Bernoulli(6/11) values, averaged over the runs.
    let se = (exhaustive * (1.0 - exhaustive) / (DIV_G_PAIRS * runs) as f64).sqrt();
    assert!((mean - exhaustive).abs() < 4.0 * se, "{mean} vs {exhaustive}");
}

proptest! {
    #[test]
    fn div_k_scales_quadratically(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((40, 3), || rng.sample::<f64, _>(StandardNormal));
        let centred = &x - &x.mean_axis(Axis(0)).unwrap();
        let base = div_kinetic(centred.view()).unwrap();
        let scaled = div_kinetic(centred.mapv(|v| c * v).view()).unwrap();
        prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn div_sample_ignores_sample_order(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Array2<f64>> = (0..k).map(|_| Array2::from_shape_simple_fn((8, 4), || rng.sample(StandardNormal))).collect();
        let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
        let mut reversed = views.clone();
        reversed.reverse();
        let (a, b) = (div_sample(&views).unwrap(), div_sample(&reversed).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn rigid_lip_shifts_only_move_the_mesh_error(dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 12;
        let reference = Array2::from_shape_simple_fn((15, 3 * v), || 5.0 * rng.sample::<f64, _>(StandardNormal));
        let mut shifted = reference.clone();
        for mut row in shifted.rows_mut() {
            for (c, x) in row.iter_mut().enumerate() {
                *x += [dx, dy, dz][c % 3];
            }
        }
        let e = lip_errors(&LipSequence::new(shifted).unwrap(), &LipSequence::new(reference).unwrap(), &LipKeypoints::for_ring(v)).unwrap();
        prop_assert!(e.horizontal < 1e-20);
        prop_assert!(e.vertical < 1e-20);
        prop_assert!((e.mesh - (dx * dx + dy * dy + dz * dz)).abs() < 1e-9);
    }
}
