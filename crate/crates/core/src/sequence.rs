//! Frame-sequence value types for body pose, face expression, lips and guide poses.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Motion capture frame rate used throughout.
pub const MOTION_FPS: u32 = 30;
/// Frames between consecutive guide poses (1 fps).
pub const GUIDE_STRIDE: usize = 30;
/// Latent face expression code width.
pub const FACE_DIM: usize = 256;
/// Default body+hand rotation angle count.
pub const DEFAULT_POSE_DIM: usize = 104;

/// Anything stored as a `T × d` matrix of frames.
pub trait FrameSeq<T: Scalar> {
    fn frames(&self) -> ArrayView2<'_, T>;

    fn len(&self) -> usize {
        self.frames().nrows()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        self.frames().ncols()
    }
}

fn check_finite<T: Scalar>(frames: &Array2<T>, what: &'static str) -> Result<()> {
    if frames.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_nonempty<T>(frames: &Array2<T>, what: &str) -> Result<()> {
    if frames.nrows() == 0 {
        return Err(Error::shape(format!("{what} needs at least one frame")));
    }
    Ok(())
}

/// Body and hand rotation angles (radians), one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    frames: Array2<T>,
    fps: u32,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Array2<T>, fps: u32) -> Result<Self> {
        check_nonempty(&frames, "motion sequence")?;
        check_finite(&frames, "motion sequence")?;
        if fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        Ok(Self { frames, fps })
    }

    /// 30 fps motion.
    pub fn at_30fps(frames: Array2<T>) -> Result<Self> {
        Self::new(frames, MOTION_FPS)
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn into_frames(self) -> Array2<T> {
        self.frames
    }

    /// Frames `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(slice_rows(&self.frames, start, len)?, self.fps)
    }
}

impl<T: Scalar> FrameSeq<T> for MotionSequence<T> {
    fn frames(&self) -> ArrayView2<'_, T> {
        self.frames.view()
    }
}

/// Latent face expression codes, one 256-wide row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSequence<T> {
    frames: Array2<T>,
}

impl<T: Scalar> FaceSequence<T> {
    pub fn new(frames: Array2<T>) -> Result<Self> {
        check_nonempty(&frames, "face sequence")?;
        check_finite(&frames, "face sequence")?;
        Ok(Self { frames })
    }

    pub fn into_frames(self) -> Array2<T> {
        self.frames
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(slice_rows(&self.frames, start, len)?)
    }
}

impl<T: Scalar> FrameSeq<T> for FaceSequence<T> {
    fn frames(&self) -> ArrayView2<'_, T> {
        self.frames.view()
    }
}

/// Lip vertex positions in millimetres, `d_l` vertices as `(x, y, z)` triples per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LipSequence<T> {
    frames: Array2<T>,
}

impl<T: Scalar> LipSequence<T> {
    pub fn new(frames: Array2<T>) -> Result<Self> {
        check_nonempty(&frames, "lip sequence")?;
        if frames.ncols() % 3 != 0 {
            return Err(Error::shape(format!(
                "lip frames must hold xyz triples, got {} columns",
                frames.ncols()
            )));
        }
        check_finite(&frames, "lip sequence")?;
        Ok(Self { frames })
    }

    pub fn vertex_count(&self) -> usize {
        self.frames.ncols() / 3
    }

    /// Position of `vertex` at frame `t`.
    pub fn vertex(&self, t: usize, vertex: usize) -> [T; 3] {
        let row = self.frames.row(t);
        [row[3 * vertex], row[3 * vertex + 1], row[3 * vertex + 2]]
    }

    pub fn into_frames(self) -> Array2<T> {
        self.frames
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(slice_rows(&self.frames, start, len)?)
    }
}

impl<T: Scalar> FrameSeq<T> for LipSequence<T> {
    fn frames(&self) -> ArrayView2<'_, T> {
        self.frames.view()
    }
}

/// Coarse poses sampled once per second.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidePoseSequence<T> {
    poses: Array2<T>,
    /// Motion frames between consecutive poses (30 for guide poses, 1 for per-frame tokenization).
    stride: usize,
}

impl<T: Scalar> GuidePoseSequence<T> {
    pub fn new(poses: Array2<T>) -> Result<Self> {
        Self::with_stride(poses, GUIDE_STRIDE)
    }

    pub fn with_stride(poses: Array2<T>, stride: usize) -> Result<Self> {
        check_nonempty(&poses, "guide pose sequence")?;
        check_finite(&poses, "guide pose sequence")?;
        if stride == 0 {
            return Err(Error::invalid("guide stride must be positive"));
        }
        Ok(Self { poses, stride })
    }

    pub fn poses(&self) -> ArrayView2<'_, T> {
        self.poses.view()
    }

    pub fn into_poses(self) -> Array2<T> {
        self.poses
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of guide poses `K`.
    pub fn count(&self) -> usize {
        self.poses.nrows()
    }

    /// 0-indexed motion frame each guide pose was taken from.
    pub fn frame_indices(&self) -> Vec<usize> {
        (0..self.count()).map(|k| (k + 1) * self.stride - 1).collect()
    }
}

impl<T: Scalar> FrameSeq<T> for GuidePoseSequence<T> {
    fn frames(&self) -> ArrayView2<'_, T> {
        self.poses.view()
    }
}

pub(crate) fn slice_rows<T: Scalar>(m: &Array2<T>, start: usize, len: usize) -> Result<Array2<T>> {
    if len == 0 || start + len > m.nrows() {
        return Err(Error::shape(format!(
            "slice {start}..{} out of range for {} frames",
            start + len,
            m.nrows()
        )));
    }
    Ok(m.slice(s![start..start + len, ..]).to_owned())
}

/// Takes one pose per second: pose `k` (1-indexed) is frame `k·30`, i.e. 0-indexed frame `k·30 − 1`.
pub fn subsample_guide_poses<T: Scalar>(motion: &MotionSequence<T>) -> Result<GuidePoseSequence<T>> {
    subsample_with_stride(motion, GUIDE_STRIDE)
}

/// Generalized subsampling; `stride = 1` returns every frame.
pub fn subsample_with_stride<T: Scalar>(
    motion: &MotionSequence<T>,
    stride: usize,
) -> Result<GuidePoseSequence<T>> {
    if stride == GUIDE_STRIDE && motion.fps() != MOTION_FPS {
        return Err(Error::invalid(format!(
            "guide subsampling expects {MOTION_FPS} fps motion, got {}",
            motion.fps()
        )));
    }
    let frames = motion.frames();
    let k = frames.nrows() / stride;
    if k == 0 {
        return Err(Error::TooShortForGuides {
            frames: frames.nrows(),
            needed: stride,
        });
    }
    let indices: Vec<usize> = (1..=k).map(|k| k * stride - 1).collect();
    let poses = frames.select(Axis(0), &indices);
    GuidePoseSequence::with_stride(poses, stride)
}

/// Row `t` is `frames[t+1] − frames[t]`.
pub fn velocities<T: Scalar, S: FrameSeq<T> + ?Sized>(seq: &S) -> Result<Array2<T>> {
    frame_differences(seq.frames())
}

pub fn frame_differences<T: Scalar>(frames: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = frames.nrows();
    if n < 2 {
        return Err(Error::NeedTwoFrames);
    }
    Ok(&frames.slice(s![1.., ..]) - &frames.slice(s![..n - 1, ..]))
}
