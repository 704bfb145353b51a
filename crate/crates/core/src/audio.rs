//! Frame-aligned dyadic audio features and the built-in spectral front end.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde_json::{Map, Value};

use crate::arrayfile::{header_usize, read_array_file, write_array_file};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::MOTION_FPS;

pub const DEFAULT_FEATURE_DIM: usize = 80;

/// Mono PCM samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate: u32) -> Self {
        Self { samples, rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    /// Reads a mono (or first-channel) WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .step_by(channels)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(e.to_string()))?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .step_by(channels)
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::invalid(e.to_string()))?
            }
        };
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::invalid(e.to_string()))?;
        for &s in &self.samples {
            w.write_sample(s).map_err(|e| Error::invalid(e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(())
    }
}

/// Two feature streams (self, other), `2 × d_a × T`, at 30 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures<T> {
    data: Array3<T>,
}

impl<T: Scalar> AudioFeatures<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (streams, d_a, frames) = data.dim();
        if streams != 2 {
            return Err(Error::shape(format!("audio features need 2 streams, got {streams}")));
        }
        if d_a == 0 || frames == 0 {
            return Err(Error::shape("audio features need a positive feature width and frame count"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("audio features"));
        }
        Ok(Self { data })
    }

    /// Builds from per-stream `T × d_a` matrices.
    pub fn from_streams(self_frames: ArrayView2<'_, T>, other_frames: ArrayView2<'_, T>) -> Result<Self> {
        if self_frames.dim() != other_frames.dim() {
            return Err(Error::shape(format!(
                "stream shapes differ: {:?} vs {:?}",
                self_frames.dim(),
                other_frames.dim()
            )));
        }
        let (t, d) = self_frames.dim();
        let mut data = Array3::zeros((2, d, t));
        data.slice_mut(s![0, .., ..]).assign(&self_frames.t());
        data.slice_mut(s![1, .., ..]).assign(&other_frames.t());
        Self::new(data)
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn feature_dim(&self) -> usize {
        self.data.dim().1
    }

    pub fn frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / MOTION_FPS as f64
    }

    /// `T × d_a` view of one stream (0 = self, 1 = other).
    pub fn stream(&self, index: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), index).reversed_axes()
    }

    /// `T × 2·d_a` matrix with self features followed by other features on each row.
    pub fn frame_matrix(&self) -> Array2<T> {
        ndarray::concatenate(Axis(1), &[self.stream(0), self.stream(1)]).expect("equal stream shapes")
    }

    /// Exchanges the self and other streams.
    pub fn swapped(&self) -> Self {
        Self::from_streams(self.stream(1), self.stream(0)).expect("valid features")
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::shape(format!(
                "audio slice {start}..{} out of range for {} frames",
                start + len,
                self.frames()
            )));
        }
        Self::new(self.data.slice(s![.., .., start..start + len]).to_owned())
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.mapv(f) }
    }

    /// Saves in the feature file format with `rate_hz = 30`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_feature_file(path, self.data.view(), MOTION_FPS as f64)
    }
}

/// Where sampling takes its audio features from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// The built-in spectral front end.
    Builtin,
    /// A precomputed feature file.
    File(std::path::PathBuf),
}

impl std::str::FromStr for FeatureSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "builtin" {
            FeatureSource::Builtin
        } else {
            FeatureSource::File(s.into())
        })
    }
}

/// Writes `data` (`2 × d_a × T`) with the `{streams, d_a, T, rate_hz}` header.
pub fn save_feature_file<T: Scalar>(path: &Path, data: ndarray::ArrayView3<'_, T>, rate_hz: f64) -> Result<()> {
    let (streams, d_a, frames) = data.dim();
    let mut header = Map::new();
    header.insert("streams".into(), Value::from(streams));
    header.insert("d_a".into(), Value::from(d_a));
    header.insert("T".into(), Value::from(frames));
    header.insert("rate_hz".into(), Value::from(rate_hz));
    let payload: Vec<f32> = data.iter().map(|v| v.as_f64() as f32).collect();
    write_array_file(path, &header, &payload)
}

/// Loads a feature file. Files at a rate other than 30 Hz are linearly resampled when
/// `resample` is set and rejected otherwise.
pub fn load_external_features<T: Scalar>(path: &Path, resample: bool) -> Result<AudioFeatures<T>> {
    let malformed = |reason: String| Error::MalformedFeatureFile {
        path: path.to_path_buf(),
        reason,
    };
    let (header, payload) = read_array_file(path).map_err(malformed)?;
    let streams = header_usize(&header, "streams").map_err(malformed)?;
    let d_a = header_usize(&header, "d_a").map_err(malformed)?;
    let frames = header_usize(&header, "T").map_err(malformed)?;
    let rate = header
        .get("rate_hz")
        .and_then(Value::as_f64)
        .filter(|r| *r > 0.0)
        .ok_or_else(|| malformed("header field \"rate_hz\" missing or not positive".into()))?;
    if streams != 2 {
        return Err(malformed(format!("expected 2 streams (self, other), header declares {streams}")));
    }
    if payload.len() != streams * d_a * frames {
        return Err(malformed(format!(
            "header declares {streams}x{d_a}x{frames} values but payload holds {}",
            payload.len()
        )));
    }
    let data = Array3::from_shape_vec((streams, d_a, frames), payload.into_iter().map(|v| T::lit(v as f64)).collect())
        .map_err(|e| malformed(e.to_string()))?;
    let data = if (rate - MOTION_FPS as f64).abs() < 1e-9 {
        data
    } else if resample {
        resample_linear(&data, rate, MOTION_FPS as f64)
    } else {
        return Err(malformed(format!("features are at {rate} Hz; resampling to 30 Hz was not requested")));
    };
    AudioFeatures::new(data).map_err(|e| malformed(e.to_string()))
}

/// Linear interpolation along the last axis from `from_hz` to `to_hz`.
/// Output frame `t` samples the source at time `t / to_hz`.
pub fn resample_linear<T: Scalar>(data: &Array3<T>, from_hz: f64, to_hz: f64) -> Array3<T> {
    let (a, b, n) = data.dim();
    let out_len = ((n as f64 / from_hz) * to_hz + 1e-9).floor().max(1.0) as usize;
    let mut out = Array3::zeros((a, b, out_len));
    for t in 0..out_len {
        let pos = t as f64 * from_hz / to_hz;
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let w = T::lit((pos - i0 as f64).clamp(0.0, 1.0));
        let lo = data.slice(s![.., .., i0]);
        let hi = data.slice(s![.., .., i1]);
        let mut dst = out.slice_mut(s![.., .., t]);
        ndarray::Zip::from(&mut dst)
            .and(&lo)
            .and(&hi)
            .for_each(|o, &l, &h| *o = l + (h - l) * w);
    }
    out
}

/// Built-in log filterbank front end configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontEnd {
    /// Number of filterbank bands (`d_a`).
    pub bands: usize,
    /// Upper band edge; clipped at Nyquist.
    pub max_hz: f64,
}

impl Default for FrontEnd {
    fn default() -> Self {
        Self {
            bands: DEFAULT_FEATURE_DIM,
            max_hz: 8000.0,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `fft_len / 2 + 1` bins.
pub fn mel_filterbank(bands: usize, fft_len: usize, rate: u32, max_hz: f64) -> Array2<f64> {
    let bins = fft_len / 2 + 1;
    let top = max_hz.min(rate as f64 / 2.0);
    let mel_top = hz_to_mel(top);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(mel_top * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = rate as f64 / fft_len as f64;
    let mut fb = Array2::zeros((bands, bins));
    for b in 0..bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

struct StreamAnalyzer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    filterbank: Array2<f64>,
    rate: u32,
}

impl StreamAnalyzer {
    fn new(front: &FrontEnd, rate: u32) -> Self {
        let win_len = ((2.0 * rate as f64 / MOTION_FPS as f64).round() as usize).max(2);
        let fft_len = win_len.next_power_of_two();
        let window = (0..win_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win_len - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Self {
            window,
            fft,
            fft_len,
            filterbank: mel_filterbank(front.bands, fft_len, rate, front.max_hz),
            rate,
        }
    }

    /// Log filterbank energies, `frames × bands`, frame `t` centred at `(t + 0.5) / 30` s.
    fn log_energies(&self, samples: &[f32], frames: usize) -> Array2<f64> {
        let bands = self.filterbank.nrows();
        let win_len = self.window.len() as i64;
        let mut out = Array2::zeros((frames, bands));
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut power = vec![0.0; self.fft_len / 2 + 1];
        for t in 0..frames {
            let centre = ((t as f64 + 0.5) * self.rate as f64 / MOTION_FPS as f64).round() as i64;
            let start = centre - win_len / 2;
            for (i, c) in buf.iter_mut().enumerate() {
                let idx = start + i as i64;
                let v = if (i as i64) < win_len && idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize] as f64 * self.window[i]
                } else {
                    0.0
                };
                *c = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for b in 0..bands {
                let e: f64 = self.filterbank.row(b).iter().zip(&power).map(|(w, p)| w * p).sum();
                out[[t, b]] = (e + 1e-10).ln();
            }
        }
        out
    }
}

/// Per-column standardization over time; zero-variance columns become zeros.
fn standardize(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var < 1e-12 {
            col.fill(0.0);
        } else {
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
}

/// Converts a dyad of waveforms into 30 Hz features, one stream per speaker.
///
/// `T = floor(duration · 30)` where duration is the shorter of the two takes; the takes must agree
/// to within one motion frame.
pub fn extract_features<T: Scalar>(
    waveform_self: &Waveform,
    waveform_other: &Waveform,
    front: &FrontEnd,
) -> Result<AudioFeatures<T>> {
    if waveform_self.samples.is_empty() || waveform_other.samples.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if waveform_self.rate == 0 || waveform_other.rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if front.bands == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let (ds, d_o) = (waveform_self.duration_s(), waveform_other.duration_s());
    if (ds - d_o).abs() > 1.0 / MOTION_FPS as f64 {
        return Err(Error::UnalignedAudio { self_s: ds, other_s: d_o });
    }
    let frames = (ds.min(d_o) * MOTION_FPS as f64 + 1e-9).floor() as usize;
    if frames == 0 {
        return Err(Error::invalid("audio is shorter than one motion frame"));
    }
    let mut streams = [waveform_self, waveform_other].map(|w| {
        let mut m = StreamAnalyzer::new(front, w.rate).log_energies(&w.samples, frames);
        standardize(&mut m);
        m
    });
    let [a, b] = &mut streams;
    let a = a.mapv(T::lit);
    let b = b.mapv(T::lit);
    AudioFeatures::from_streams(a.view(), b.view())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(seconds: f64, rate: u32, hz: f64, amp: f32) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / rate as f64).sin() as f32)
                .collect(),
            rate,
        )
    }

    fn am_tone(seconds: f64, rate: u32, hz: f64) -> Waveform {
        let mut w = tone(seconds, rate, hz, 0.5);
        for (i, s) in w.samples.iter_mut().enumerate() {
            *s *= (1.0 + (i as f32 / rate as f32 * 7.0).sin()) * 0.5;
        }
        w
    }

    #[test]
    fn one_second_at_48k_gives_30_frames() {
        let a = am_tone(1.0, 48_000, 440.0);
        let b = am_tone(1.0, 48_000, 220.0);
        let f: AudioFeatures<f32> = extract_features(&a, &b, &FrontEnd::default()).unwrap();
        assert_eq!(f.frames(), 30);
        assert_eq!(f.feature_dim(), 80);
    }

    #[test]
    fn silence_gives_zero_features() {
        let s = Waveform::new(vec![0.0; 16_000], 16_000);
        let f: AudioFeatures<f64> = extract_features(&s, &s, &FrontEnd::default()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_waveforms_swaps_streams() {
        let a = am_tone(1.5, 16_000, 300.0);
        let b = am_tone(1.5, 16_000, 900.0);
        let ab: AudioFeatures<f32> = extract_features(&a, &b, &FrontEnd::default()).unwrap();
        let ba: AudioFeatures<f32> = extract_features(&b, &a, &FrontEnd::default()).unwrap();
        assert_eq!(ab.swapped(), ba);
    }

    #[test]
    fn extraction_is_deterministic() {
        let a = am_tone(1.0, 16_000, 300.0);
        let b = am_tone(1.0, 16_000, 500.0);
        let x: AudioFeatures<f32> = extract_features(&a, &b, &FrontEnd::default()).unwrap();
        let y: AudioFeatures<f32> = extract_features(&a, &b, &FrontEnd::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn misaligned_and_empty_audio_are_rejected() {
        let a = tone(1.0, 16_000, 300.0, 0.5);
        let b = tone(1.1, 16_000, 300.0, 0.5);
        assert!(matches!(
            extract_features::<f32>(&a, &b, &FrontEnd::default()),
            Err(Error::UnalignedAudio { .. })
        ));
        let empty = Waveform::new(vec![], 16_000);
        assert!(matches!(
            extract_features::<f32>(&a, &empty, &FrontEnd::default()),
            Err(Error::EmptyWaveform)
        ));
        // within one frame is accepted
        let c = tone(1.02, 16_000, 300.0, 0.5);
        assert!(extract_features::<f32>(&a, &c, &FrontEnd::default()).is_ok());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let data = Array3::from_shape_fn((2, 16, 90), |(s, d, t)| ((s * 31 + d * 7 + t) as f32 * 0.37).sin());
        let feats = AudioFeatures::new(data).unwrap();
        feats.save(&path).unwrap();
        let back: AudioFeatures<f32> = load_external_features(&path, false).unwrap();
        assert_eq!(back, feats);
    }

    #[test]
    fn fifty_hz_ramp_is_resampled_to_thirty() {
        // Feature value = time in seconds, sampled at 50 Hz for 3 s. Interpolating a linear signal is
        // exact, so output frame t must equal t / 30.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f50.bin");
        let data = Array3::from_shape_fn((2, 3, 150), |(_, _, t)| t as f64 / 50.0);
        save_feature_file(&path, data.view(), 50.0).unwrap();
        assert!(load_external_features::<f64>(&path, false).is_err());
        let feats: AudioFeatures<f64> = load_external_features(&path, true).unwrap();
        assert_eq!(feats.frames(), 90);
        for t in 0..90 {
            let v = feats.data()[[1, 2, t]];
            assert!((v - t as f64 / 30.0).abs() < 1e-6, "frame {t}: {v}");
        }
    }

    #[test]
    fn resampling_a_constant_is_constant() {
        let data = Array3::from_elem((2, 4, 77), 2.5f64);
        let out = resample_linear(&data, 44.1, 30.0);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn missing_stream_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let data = Array3::from_elem((1, 4, 10), 0.0f32);
        save_feature_file(&path, data.view(), 30.0).unwrap();
        let err = load_external_features::<f32>(&path, false).unwrap_err();
        assert!(err.to_string().contains("malformed feature file"), "{err}");
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = tone(0.25, 16_000, 440.0, 0.3);
        w.write_wav(&path).unwrap();
        assert_eq!(Waveform::read_wav(&path).unwrap(), w);
    }
}
