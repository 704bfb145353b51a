//! Takes: time-aligned audio, face, body and lip tracks, with on-disk layout and corpus splits.
//!
//! A take directory holds `meta.json` and one array file per modality (`audio.bin`, `face.bin`,
//! `motion.bin`, `lips.bin`). `meta.json` records the format version, frame counts and a SHA-256
//! checksum of every array file. A corpus directory holds `manifest.json` and one sub-directory
//! per take.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrayfile::{corrupt, read_matrix, write_matrix};
use crate::audio::{load_external_features, AudioFeatures};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{FaceSequence, FrameSeq, LipSequence, MotionSequence, MOTION_FPS};

pub const TAKE_FORMAT_VERSION: &str = "dyadmotion-take/1";
pub const CORPUS_FORMAT_VERSION: &str = "dyadmotion-corpus/1";

/// Conversational role of the rendered participant at one frame (diagnostics only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Speaking,
    Listening,
    Silent,
    Unknown,
}

impl Role {
    fn code(self) -> char {
        match self {
            Role::Speaking => 'S',
            Role::Listening => 'L',
            Role::Silent => 'Q',
            Role::Unknown => 'U',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'S' => Role::Speaking,
            'L' => Role::Listening,
            'Q' => Role::Silent,
            'U' => Role::Unknown,
            _ => return None,
        })
    }
}

/// One conversation clip; every track has the same frame count at 30 fps.
#[derive(Clone, Debug, PartialEq)]
pub struct Take<T> {
    pub id: String,
    pub audio: AudioFeatures<T>,
    pub face: FaceSequence<T>,
    pub motion: MotionSequence<T>,
    pub lips: LipSequence<T>,
    pub roles: Vec<Role>,
}

impl<T: Scalar> Take<T> {
    pub fn frames(&self) -> usize {
        self.motion.len()
    }

    /// Checks that every track agrees on length.
    pub fn validate(&self) -> Result<()> {
        let t = self.motion.len();
        let lens = [self.audio.frames(), self.face.len(), self.lips.len(), self.roles.len()];
        if lens.iter().any(|&l| l != t) {
            return Err(Error::shape(format!(
                "take {} has mismatched track lengths: motion {t}, audio/face/lips/roles {lens:?}",
                self.id
            )));
        }
        if self.motion.fps() != MOTION_FPS {
            return Err(Error::shape(format!("take {} is not at 30 fps", self.id)));
        }
        Ok(())
    }

    /// Frames `start..start+len` of every track.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            audio: self.audio.slice(start, len)?,
            face: self.face.slice(start, len)?,
            motion: self.motion.slice(start, len)?,
            lips: self.lips.slice(start, len)?,
            roles: self.roles[start..start + len].to_vec(),
        })
    }
}

/// Uniform random training windows: length uniform over `[min_len, max_len]` clipped to the take,
/// start uniform over the valid range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSampler {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for WindowSampler {
    fn default() -> Self {
        Self { min_len: 240, max_len: 600 }
    }
}

impl WindowSampler {
    /// `(start, len)` for a take with `frames` frames.
    pub fn draw<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Result<(usize, usize)> {
        if frames < self.min_len {
            return Err(Error::invalid(format!(
                "take has {frames} frames, training windows need at least {}",
                self.min_len
            )));
        }
        let hi = self.max_len.min(frames);
        let len = rng.random_range(self.min_len..=hi);
        let start = rng.random_range(0..=frames - len);
        Ok((start, len))
    }
}

/// Training window with the default 240–600 frame range.
pub fn sample_training_window<T: Scalar, R: Rng + ?Sized>(take: &Take<T>, rng: &mut R) -> Result<Take<T>> {
    let (start, len) = WindowSampler::default().draw(take.frames(), rng)?;
    take.slice(start, len)
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TakeMeta {
    version: String,
    id: String,
    frames: usize,
    fps: u32,
    pose_dim: usize,
    feature_dim: usize,
    lip_dim: usize,
    roles: String,
    files: BTreeMap<String, FileEntry>,
}

const MODALITIES: [&str; 4] = ["audio", "face", "motion", "lips"];

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes `take` into `dir` (created if missing).
pub fn save_take<T: Scalar>(take: &Take<T>, dir: &Path) -> Result<()> {
    take.validate()?;
    std::fs::create_dir_all(dir)?;
    take.audio.save(&dir.join("audio.bin"))?;
    write_matrix(&dir.join("face.bin"), "face", &take.face.frames().to_owned())?;
    write_matrix(&dir.join("motion.bin"), "motion", &take.motion.frames().to_owned())?;
    write_matrix(&dir.join("lips.bin"), "lips", &take.lips.frames().to_owned())?;
    let mut files = BTreeMap::new();
    for m in MODALITIES {
        let name = format!("{m}.bin");
        let sha256 = sha256_file(&dir.join(&name))?;
        files.insert(m.to_string(), FileEntry { name, sha256 });
    }
    let meta = TakeMeta {
        version: TAKE_FORMAT_VERSION.into(),
        id: take.id.clone(),
        frames: take.frames(),
        fps: take.motion.fps(),
        pose_dim: take.motion.dim(),
        feature_dim: take.audio.feature_dim(),
        lip_dim: take.lips.dim(),
        roles: take.roles.iter().map(|r| r.code()).collect(),
        files,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads a take written by [`save_take`], verifying version, checksums and shapes.
pub fn load_take<T: Scalar>(dir: &Path) -> Result<Take<T>> {
    let meta_path = dir.join("meta.json");
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&meta_path)?)?;
    let version = raw.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != TAKE_FORMAT_VERSION {
        return Err(Error::UnknownVersion(version.to_string()));
    }
    let meta: TakeMeta = serde_json::from_value(raw).map_err(|e| corrupt(dir, format!("meta.json schema: {e}")))?;
    for m in MODALITIES {
        let entry = meta
            .files
            .get(m)
            .ok_or_else(|| corrupt(dir, format!("meta.json lists no {m} file")))?;
        let path = dir.join(&entry.name);
        if !path.is_file() {
            return Err(corrupt(dir, format!("missing {m} file {}", entry.name)));
        }
        if sha256_file(&path)? != entry.sha256 {
            return Err(corrupt(dir, format!("checksum mismatch for {}", entry.name)));
        }
    }
    let file = |m: &str| dir.join(&meta.files[m].name);
    let audio = load_external_features(&file("audio"), false).map_err(|e| corrupt(dir, e.to_string()))?;
    let face = read_matrix(&file("face"), "face").map_err(|e| corrupt(dir, e))?;
    let motion = read_matrix(&file("motion"), "motion").map_err(|e| corrupt(dir, e))?;
    let lips = read_matrix(&file("lips"), "lips").map_err(|e| corrupt(dir, e))?;
    let roles = meta
        .roles
        .chars()
        .map(|c| Role::from_code(c).ok_or_else(|| corrupt(dir, format!("unknown role code {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let take = Take {
        id: meta.id,
        audio,
        face: FaceSequence::new(face).map_err(|e| corrupt(dir, e.to_string()))?,
        motion: MotionSequence::new(motion, meta.fps).map_err(|e| corrupt(dir, e.to_string()))?,
        lips: LipSequence::new(lips).map_err(|e| corrupt(dir, e.to_string()))?,
        roles,
    };
    if take.frames() != meta.frames
        || take.motion.dim() != meta.pose_dim
        || take.audio.feature_dim() != meta.feature_dim
        || take.lips.dim() != meta.lip_dim
    {
        return Err(corrupt(dir, "array shapes disagree with meta.json"));
    }
    take.validate().map_err(|e| corrupt(dir, e.to_string()))?;
    Ok(take)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Assigns splits by ranking ids on their SHA-256: the first 80% train, the next 10% val, the rest
/// test. With three or more takes each split gets at least one.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| Sha256::digest(ids[i].as_bytes()).to_vec());
    let (mut n_val, mut n_test) = ((n as f64 * 0.1).round() as usize, (n as f64 * 0.1).round() as usize);
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let n_train = n.saturating_sub(n_val + n_test);
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: String,
    pub master_seed: u64,
    pub duration_s: f64,
    pub takes: Vec<ManifestEntry>,
}

/// A corpus directory on disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    /// Writes every take and a manifest with split assignments.
    pub fn write<T: Scalar>(root: &Path, takes: &[Take<T>], master_seed: u64, duration_s: f64) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let ids: Vec<String> = takes.iter().map(|t| t.id.clone()).collect();
        let splits = assign_splits(&ids);
        for take in takes {
            save_take(take, &root.join(&take.id))?;
        }
        let manifest = CorpusManifest {
            version: CORPUS_FORMAT_VERSION.into(),
            master_seed,
            duration_s,
            takes: ids
                .into_iter()
                .zip(splits)
                .map(|(id, split)| ManifestEntry { id, split })
                .collect(),
        };
        std::fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_slice(&std::fs::read(root.join("manifest.json"))?)?;
        if manifest.version != CORPUS_FORMAT_VERSION {
            return Err(Error::UnknownVersion(manifest.version));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.manifest
            .takes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn load_split<T: Scalar>(&self, split: Split) -> Result<Vec<Take<T>>> {
        self.ids(split).into_iter().map(|id| load_take(&self.root.join(id))).collect()
    }
}
