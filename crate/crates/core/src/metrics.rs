//! Evaluation metrics: Frechet distances over static frames and velocity windows, three
//! diversity measures, lip errors, and the versioned evaluation report.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{frame_differences, FrameSeq, LipSequence};
use crate::synth::LipKeypoints;

/// Velocity window length used by the kinetic Frechet distance.
pub const KINETIC_WINDOW: usize = 30;
/// Frame pairs drawn per sequence by [`div_geometric`].
pub const DIV_G_PAIRS: usize = 30;

pub const REPORT_VERSION: &str = "dyadmotion-report/1";

fn to_dmatrix<T: Scalar>(x: ArrayView2<'_, T>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]].as_f64())
}

/// Column means and the centred sample matrix.
fn centre(x: &DMatrix<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let m = x.nrows() as f64;
    let mu = x.row_sum().transpose() / m;
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    (mu, c)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn check_fd_inputs(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.1 != b.1 {
        return Err(Error::shape(format!("Frechet distance dimension mismatch: {} vs {}", a.1, b.1)));
    }
    if a.0 < 2 || b.0 < 2 {
        return Err(Error::invalid("Frechet distance needs at least two samples per set"));
    }
    Ok(())
}

/// Gaussian Frechet distance computed from `d × d` covariances.
///
/// The trace of `(Σa Σb)^{1/2}` is taken as the trace of `(Sa Σb Sa)^{1/2}` with `Sa = Σa^{1/2}`,
/// which is symmetric and so has a well-defined eigendecomposition.
pub fn frechet_distance_covariance<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    check_fd_inputs(a.dim(), b.dim())?;
    let (mu_a, xa) = centre(&to_dmatrix(a));
    let (mu_b, xb) = centre(&to_dmatrix(b));
    let sa = xa.transpose() * &xa / (a.nrows() as f64 - 1.0);
    let sb = xb.transpose() * &xb / (b.nrows() as f64 - 1.0);
    let root_a = sqrt_psd(&sa);
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let fd = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Gaussian Frechet distance computed from sample Gram matrices.
///
/// With centred sample matrices `Xa`, `Xb`, the eigenvalues of `Σa Σb` are the squared singular
/// values of `Xa Xbᵀ / √((Ma−1)(Mb−1))`, so the cross term is that matrix's nuclear norm. This
/// avoids `d × d` work when there are fewer samples than dimensions.
pub fn frechet_distance_gram<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    check_fd_inputs(a.dim(), b.dim())?;
    let (ma, mb) = (a.nrows() as f64 - 1.0, b.nrows() as f64 - 1.0);
    let (mu_a, xa) = centre(&to_dmatrix(a));
    let (mu_b, xb) = centre(&to_dmatrix(b));
    let cross_gram = &xa * xb.transpose() / (ma * mb).sqrt();
    let nuclear: f64 = cross_gram.singular_values().iter().sum();
    let fd = (mu_a - mu_b).norm_squared() + xa.norm_squared() / ma + xb.norm_squared() / mb - 2.0 * nuclear;
    Ok(fd.max(0.0))
}

/// Frechet distance between Gaussians fitted to two sample sets (rows are samples).
///
/// Picks the covariance or Gram route by problem size; both give the same value.
pub fn frechet_distance<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    check_fd_inputs(a.dim(), b.dim())?;
    let d = a.ncols();
    if d > a.nrows() || d > b.nrows() {
        log::debug!("Frechet distance with {} and {} samples in {d} dimensions: covariances are rank deficient", a.nrows(), b.nrows());
    }
    if a.nrows() * b.nrows() < d * d {
        frechet_distance_gram(a, b)
    } else {
        frechet_distance_covariance(a, b)
    }
}

fn stack<T: Scalar>(parts: &[Array2<T>], dim: usize) -> Array2<T> {
    let views: Vec<ArrayView2<'_, T>> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, dim));
    }
    ndarray::concatenate(Axis(0), &views).expect("rows share a width")
}

/// FD between pooled static frames of two sets of sequences.
pub fn fd_geometric<T: Scalar>(generated: &[ArrayView2<'_, T>], reference: &[ArrayView2<'_, T>]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("FD_g needs nonempty generated and reference sets"));
    }
    let pool = |set: &[ArrayView2<'_, T>]| stack(&set.iter().map(|v| v.to_owned()).collect::<Vec<_>>(), set[0].ncols());
    frechet_distance(pool(generated).view(), pool(reference).view())
}

/// Non-overlapping windows of `W` consecutive velocities, each flattened to one row.
/// Sequences shorter than `W + 1` frames are skipped with a warning.
pub fn velocity_windows<T: Scalar>(sequences: &[ArrayView2<'_, T>], window: usize) -> Array2<T> {
    let dim = sequences.first().map_or(0, |s| s.ncols()) * window;
    let mut rows = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        if seq.nrows() < window + 1 {
            log::warn!("sequence {i} has {} frames, FD_k needs {}; skipped", seq.nrows(), window + 1);
            continue;
        }
        let vel = frame_differences(seq.view()).expect("at least two frames");
        let mut start = 0;
        while start + window <= vel.nrows() {
            let w = vel.slice(ndarray::s![start..start + window, ..]);
            rows.push(Array2::from_shape_vec((1, dim), w.iter().copied().collect()).expect("window size"));
            start += window;
        }
    }
    stack(&rows, dim)
}

/// FD between pooled flattened velocity windows of length [`KINETIC_WINDOW`].
pub fn fd_kinetic<T: Scalar>(generated: &[ArrayView2<'_, T>], reference: &[ArrayView2<'_, T>]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("FD_k needs nonempty generated and reference sets"));
    }
    let g = velocity_windows(generated, KINETIC_WINDOW);
    let r = velocity_windows(reference, KINETIC_WINDOW);
    if g.nrows() < 2 || r.nrows() < 2 {
        return Err(Error::invalid(format!(
            "FD_k needs at least two velocity windows per set, got {} and {}",
            g.nrows(),
            r.nrows()
        )));
    }
    frechet_distance(g.view(), r.view())
}

fn row_distance<T: Scalar>(x: ArrayView2<'_, T>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean L2 distance over [`DIV_G_PAIRS`] frame pairs drawn uniformly from all unordered pairs of
/// distinct frames.
pub fn div_geometric<T: Scalar, R: Rng + ?Sized>(frames: ArrayView2<'_, T>, rng: &mut R) -> Result<f64> {
    let t = frames.nrows();
    if t < 2 {
        return Err(Error::NeedTwoFrames);
    }
    let mut total = 0.0;
    for _ in 0..DIV_G_PAIRS {
        let i = rng.random_range(0..t);
        let mut j = rng.random_range(0..t - 1);
        if j >= i {
            j += 1;
        }
        total += row_distance(frames, i, j);
    }
    Ok(total / DIV_G_PAIRS as f64)
}

/// Mean over feature dimensions of the (population) variance over time.
pub fn div_kinetic<T: Scalar>(frames: ArrayView2<'_, T>) -> Result<f64> {
    let t = frames.nrows();
    if t == 0 || frames.ncols() == 0 {
        return Err(Error::invalid("Div_k needs a nonempty sequence"));
    }
    let mut total = 0.0;
    for col in frames.columns() {
        let mean = col.iter().map(|v| v.as_f64()).sum::<f64>() / t as f64;
        total += col.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / t as f64;
    }
    Ok(total / frames.ncols() as f64)
}

/// Variance across samples generated for the same audio, per frame and dimension, averaged.
pub fn div_sample<T: Scalar>(samples: &[ArrayView2<'_, T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("Div_sample needs at least two samples"));
    }
    let shape = samples[0].dim();
    if samples.iter().any(|s| s.dim() != shape) {
        return Err(Error::shape("Div_sample samples differ in shape"));
    }
    if shape.0 * shape.1 == 0 {
        return Err(Error::invalid("Div_sample needs nonempty samples"));
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let mean = samples.iter().map(|s| s[[i, j]].as_f64()).sum::<f64>() / n;
            total += samples.iter().map(|s| (s[[i, j]].as_f64() - mean).powi(2)).sum::<f64>() / n;
        }
    }
    Ok(total / (shape.0 * shape.1) as f64)
}

/// Lip errors in mm².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipErrors {
    /// Mean squared difference of the left-right distance along x.
    pub horizontal: f64,
    /// Mean squared difference of the top-bottom distance along y.
    pub vertical: f64,
    /// Mean squared vertex error over all lip vertices.
    pub mesh: f64,
}

pub fn lip_errors<T: Scalar>(generated: &LipSequence<T>, reference: &LipSequence<T>, keypoints: &LipKeypoints) -> Result<LipErrors> {
    if generated.frames().dim() != reference.frames().dim() {
        return Err(Error::shape(format!(
            "lip sequences differ in shape: {:?} vs {:?}",
            generated.frames().dim(),
            reference.frames().dim()
        )));
    }
    let v = generated.vertex_count();
    if [keypoints.top, keypoints.bottom, keypoints.left, keypoints.right].iter().any(|&k| k >= v) {
        return Err(Error::invalid(format!("lip keypoint index out of range for {v} vertices")));
    }
    let t = generated.len();
    if t == 0 {
        return Err(Error::invalid("lip errors need at least one frame"));
    }
    let opening = |seq: &LipSequence<T>, f: usize| {
        let (top, bottom) = (seq.vertex(f, keypoints.top), seq.vertex(f, keypoints.bottom));
        let (left, right) = (seq.vertex(f, keypoints.left), seq.vertex(f, keypoints.right));
        (
            (left[0].as_f64() - right[0].as_f64()).abs(),
            (top[1].as_f64() - bottom[1].as_f64()).abs(),
        )
    };
    let (mut horizontal, mut vertical) = (0.0, 0.0);
    for f in 0..t {
        let (gh, gv) = opening(generated, f);
        let (rh, rv) = opening(reference, f);
        horizontal += (gh - rh).powi(2);
        vertical += (gv - rv).powi(2);
    }
    let sq: f64 = generated
        .frames()
        .iter()
        .zip(reference.frames())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(LipErrors {
        horizontal: horizontal / t as f64,
        vertical: vertical / t as f64,
        mesh: sq / (t * v) as f64,
    })
}

/// Mean and sample standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Metrics of one system or baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Evaluation report across systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub takes: Vec<String>,
    pub systems: BTreeMap<String, SystemReport>,
}

impl EvalReport {
    pub fn new(split: impl Into<String>, seeds: Vec<u64>, takes: Vec<String>) -> Self {
        Self {
            version: REPORT_VERSION.into(),
            split: split.into(),
            seeds,
            takes,
            systems: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a report: known version, and every summary with `n ≥ 1`.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.version != REPORT_VERSION {
            return Err(Error::UnknownVersion(report.version));
        }
        for (name, sys) in &report.systems {
            if sys.metrics.is_empty() {
                return Err(Error::invalid(format!("system {name} reports no metrics")));
            }
            if let Some((metric, _)) = sys.metrics.iter().find(|(_, s)| s.n == 0) {
                return Err(Error::invalid(format!("system {name} metric {metric} has no samples")));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, m: usize, mean: &[f64], std: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((m, mean.len()), |(_, j)| {
            let z: f64 = StandardNormal.sample(rng);
            mean[j] + std[j] * z
        })
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(&mut rng, 200, &[0.0, 1.0, -2.0], &[1.0, 0.5, 2.0]);
        assert!(frechet_distance(x.view(), x.view()).unwrap().abs() < 1e-8);
    }

    #[test]
    fn shifted_unit_gaussians_are_four_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(&mut rng, 100_000, &[0.0], &[1.0]);
        let b = gaussian(&mut rng, 100_000, &[2.0], &[1.0]);
        let fd = frechet_distance(a.view(), b.view()).unwrap();
        assert!((fd - 4.0).abs() < 0.05, "{fd}");
    }

    #[test]
    fn routes_agree_when_samples_are_fewer_than_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, 12, &[0.0; 40], &[1.0; 40]);
        let b = gaussian(&mut rng, 15, &[0.3; 40], &[0.7; 40]);
        let primal = frechet_distance_covariance(a.view(), b.view()).unwrap();
        let dual = frechet_distance_gram(a.view(), b.view()).unwrap();
        // Rank-deficient covariances leave ~1e-16 eigenvalues whose square roots add noise to the primal route.
        assert!((primal - dual).abs() < 1e-6 * primal.max(1.0), "{primal} vs {dual}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Array2::<f64>::zeros((4, 2));
        let b = Array2::<f64>::zeros((4, 3));
        assert!(frechet_distance(a.view(), b.view()).is_err());
    }

    fn asymmetric_motion(t: usize) -> Array2<f64> {
        // Slow rise, fast fall: reversing time flips the velocity distribution.
        Array2::from_shape_fn((t, 2), |(i, j)| {
            let phase = (i % 40) as f64;
            let saw = if phase < 32.0 { phase / 32.0 } else { (40.0 - phase) / 8.0 };
            saw * (j + 1) as f64
        })
    }

    #[test]
    fn time_reversal_keeps_fd_g_but_not_fd_k() {
        let x = asymmetric_motion(600);
        let rev = x.slice(ndarray::s![..;-1, ..]).to_owned();
        let fd_g = fd_geometric(&[x.view()], &[rev.view()]).unwrap();
        let fd_k = fd_kinetic(&[x.view()], &[rev.view()]).unwrap();
        assert!(fd_g.abs() < 1e-8, "{fd_g}");
        assert!(fd_k > 1e-3, "{fd_k}");
        assert!(fd_kinetic(&[x.view()], &[x.view()]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn short_sequences_are_skipped_for_fd_k() {
        let x = asymmetric_motion(120);
        let short = asymmetric_motion(20);
        assert_eq!(velocity_windows(&[x.view(), short.view()], 30).nrows(), 3);
    }

    #[test]
    fn div_g_of_constant_is_zero() {
        let x = Array2::from_elem((50, 4), 0.3f64);
        assert_eq!(div_geometric(x.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 0.0);
    }

    #[test]
    fn div_g_is_seeded() {
        let x = asymmetric_motion(100);
        let a = div_geometric(x.view(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = div_geometric(x.view(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn div_k_of_sinusoid() {
        let a = 1.7;
        let x = Array2::from_shape_fn((600, 3), |(t, j)| a * (2.0 * std::f64::consts::PI * t as f64 / 60.0 + j as f64).sin());
        let v = div_kinetic(x.view()).unwrap();
        assert!((v - a * a / 2.0).abs() < 0.01 * a * a / 2.0, "{v}");
    }

    #[test]
    fn div_sample_two_points() {
        let a = Array2::from_shape_fn((10, 3), |(i, j)| (i * j) as f64);
        let v = array![1.0, -2.0, 0.5];
        let b = &a + &v;
        let expected = v.dot(&v) / (4.0 * 3.0);
        let got = div_sample(&[a.view(), b.view()]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(div_sample(&[a.view(), a.view()]).unwrap(), 0.0);
    }

    fn ring(t: usize, v: usize) -> LipSequence<f64> {
        LipSequence::new(Array2::from_shape_fn((t, v * 3), |(f, c)| ((f * 7 + c * 3) % 11) as f64 * 0.4)).unwrap()
    }

    #[test]
    fn rigid_shift_only_moves_mesh_error() {
        let r = ring(20, 8);
        let mut shifted = r.frames().to_owned();
        for mut row in shifted.rows_mut() {
            for v in 0..8 {
                row[v * 3] += 1.0;
            }
        }
        let g = LipSequence::new(shifted).unwrap();
        let kp = LipKeypoints::for_ring(8);
        let e = lip_errors(&g, &r, &kp).unwrap();
        assert!(e.horizontal.abs() < 1e-12 && e.vertical.abs() < 1e-12);
        assert!((e.mesh - 1.0).abs() < 1e-12);
        let same = lip_errors(&r, &r, &kp).unwrap();
        assert_eq!((same.horizontal, same.vertical, same.mesh), (0.0, 0.0, 0.0));
    }

    #[test]
    fn report_round_trip_and_version_check() {
        let mut report = EvalReport::new("test", vec![1, 2, 3], vec!["take_0001".into()]);
        let mut sys = SystemReport::default();
        sys.metrics.insert("fd_g".into(), MetricSummary::from_values(&[1.0, 2.0, 3.0]));
        report.systems.insert("full".into(), sys);
        let text = report.to_json().unwrap();
        assert_eq!(EvalReport::from_json(&text).unwrap(), report);
        let bad = text.replace(REPORT_VERSION, "dyadmotion-report/0");
        assert!(EvalReport::from_json(&bad).is_err());
        let s = MetricSummary::from_values(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn fd_is_symmetric_and_nonnegative(seed in 0u64..1000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(&mut rng, 30, &vec![0.0; d], &vec![1.0; d]);
            let b = gaussian(&mut rng, 25, &vec![0.5; d], &vec![2.0; d]);
            let ab = frechet_distance(a.view(), b.view()).unwrap();
            let ba = frechet_distance(b.view(), a.view()).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        }

        #[test]
        fn div_g_and_div_sample_ignore_frame_order(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(&mut rng, 2, &[0.0; 3], &[1.0; 3]);
            let x = Array2::from_shape_fn((12, 3), |(i, j)| a[[i % 2, j]]);
            let perm: Array1<usize> = Array1::from_iter((0..12).rev());
            let y = x.select(Axis(0), perm.as_slice().unwrap());
            // Both rows sets contain the same multiset of frames, so the exhaustive pair mean agrees.
            let exhaustive = |m: &Array2<f64>| {
                let mut s = 0.0;
                let mut c = 0;
                for i in 0..m.nrows() { for j in i + 1..m.nrows() { s += row_distance(m.view(), i, j); c += 1; } }
                s / c as f64
            };
            prop_assert!((exhaustive(&x) - exhaustive(&y)).abs() < 1e-12);
            let s1 = [x.view(), y.view()];
            let s2 = [y.view(), x.view()];
            prop_assert_eq!(div_sample(&s1).unwrap(), div_sample(&s2).unwrap());
        }
    }
}
