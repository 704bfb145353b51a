//! The x0-predicting transformer shared by the face and body diffusion models.
//!
//! Each block runs self-attention over time, one cross-attention layer per enabled conditioning
//! slot, a feed-forward layer and a FiLM layer driven by the diffusion-step embedding. Frame-rate
//! streams (audio, lips) are attended through a band around the query frame; guide poses carry a
//! sinusoidal embedding of the frame they were taken from and are attended within a wider band
//! (or in full when that band is 0). A null
//! slot is a single learned row.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{GuidePoseSequence, LipSequence};
use dyadmotion_core::{Error, FrameSeq, Result, Scalar, GUIDE_STRIDE};
use dyadmotion_nn::{
    band_mask, sinusoidal, Adam, AdamConfig, FeedForward, Film, Gradients, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Var,
};
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{read_manifest, read_stores, write_checkpoint, LossLog, Manifest};
use crate::diffusion::{draw_training_example, reverse_sample, ConditioningBundle, NoiseSchedule, Slot, SlotSet, X0Model};
use crate::norm::Normalizer;
use crate::TrainInfo;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Frames on either side of the query frame visible through audio and lip cross-attention.
    pub band: usize,
    /// Frames on either side of the query frame within which guide poses are visible; 0 attends
    /// to every guide. Any other value must be at least the guide stride so no frame is cut off.
    pub guide_band: usize,
    /// `Ṫ` of the training schedule.
    pub diffusion_steps: usize,
    /// Strided steps used when sampling.
    pub sample_steps: usize,
    pub guidance_scale: f64,
    /// Per-slot probability of replacing conditioning with the null marker during training.
    pub cond_drop_prob: f64,
    pub steps: usize,
    pub batch: usize,
    pub min_window: usize,
    pub max_window: usize,
    /// Training windows get a random position offset up to this many frames, so that shorter
    /// training windows still cover the positions seen when sampling long sequences.
    pub position_jitter: usize,
    pub std_floor: f64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 4,
            heads: 8,
            ffn: 1024,
            band: 15,
            guide_band: 60,
            diffusion_steps: 1000,
            sample_steps: 250,
            guidance_scale: 2.0,
            cond_drop_prob: 0.1,
            steps: 20_000,
            batch: 4,
            min_window: 240,
            max_window: 600,
            position_jitter: 0,
            std_floor: 0.05,
            log_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.blocks == 0 || self.ffn == 0 || self.batch == 0 {
            return Err(Error::invalid("diffusion blocks, ffn and batch must be positive"));
        }
        if self.min_window == 0 || self.min_window > self.max_window {
            return Err(Error::invalid("diffusion window range is empty"));
        }
        if self.guide_band != 0 && self.guide_band < GUIDE_STRIDE {
            return Err(Error::invalid(format!("guide_band must be 0 or at least {GUIDE_STRIDE}")));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::invalid("cond_drop_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Widths of the sample and each conditioning stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub sample: usize,
    /// Per-stream audio feature width `d_a`.
    pub audio: usize,
    pub lips: usize,
    pub guides: usize,
}

#[derive(Clone, Debug)]
struct SlotLayers {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct Block {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    audio: Option<SlotLayers>,
    lips: Option<SlotLayers>,
    guides: Option<SlotLayers>,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
    film: Film,
}

#[derive(Clone, Debug)]
struct StreamEncoder {
    first: Linear,
    second: Linear,
    null: ParamId,
}

impl StreamEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.in"), inputs, width, rng),
            second: Linear::new(store, &format!("{name}.out"), width, width, rng),
            null: store.add_normal(format!("{name}.null"), 1, width, 0.02, rng),
        }
    }

    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, rows: Array2<T>, positions: &[f64]) -> Var {
        let width = g.params().value(self.null).ncols();
        let x = g.constant(rows);
        let h = self.first.forward(g, x);
        let h = g.gelu(h);
        let h = self.second.forward(g, h);
        let pe = g.constant(sinusoidal(positions, width));
        g.add(h, pe)
    }
}

/// Context rows and attention mask of one slot for one forward pass.
struct Context {
    rows: Var,
    mask: Option<Array2<bool>>,
}

pub struct Denoiser<T: Scalar> {
    pub config: DiffusionConfig,
    slots: SlotSet,
    dims: StreamDims,
    params: ParamStore<T>,
    schedule: NoiseSchedule,
    input: Linear,
    step_first: Linear,
    step_second: Linear,
    audio: Option<StreamEncoder>,
    lips: Option<StreamEncoder>,
    guides: Option<StreamEncoder>,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
    pub sample_norm: Normalizer<T>,
    pub lip_norm: Normalizer<T>,
    pub guide_norm: Normalizer<T>,
    pub info: TrainInfo,
}

fn frame_positions(count: usize, offset: usize) -> Vec<f64> {
    (0..count).map(|t| (t + offset) as f64).collect()
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DiffusionConfig, slots: SlotSet, dims: StreamDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        let input = Linear::new(&mut p, "input", 3 * dims.sample, w, &mut rng);
        let step_first = Linear::new(&mut p, "step.first", w, w, &mut rng);
        let step_second = Linear::new(&mut p, "step.second", w, w, &mut rng);
        let audio = slots.audio.then(|| StreamEncoder::new(&mut p, "audio", 2 * dims.audio, w, &mut rng));
        let lips = slots.lips.then(|| StreamEncoder::new(&mut p, "lips", dims.lips, w, &mut rng));
        let guides = slots.guides.then(|| StreamEncoder::new(&mut p, "guides", dims.guides, w, &mut rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut slot = |on: bool, name: &str, p: &mut ParamStore<T>| {
                on.then(|| SlotLayers {
                    norm: LayerNorm::new(p, &format!("block{b}.{name}.norm"), w),
                    attn: MultiHeadAttention::new(p, &format!("block{b}.{name}.attn"), w, w, config.heads, &mut rng),
                })
            };
            let audio = slot(slots.audio, "audio", &mut p);
            let lips = slot(slots.lips, "lips", &mut p);
            let guides = slot(slots.guides, "guides", &mut p);
            blocks.push(Block {
                self_norm: LayerNorm::new(&mut p, &format!("block{b}.self.norm"), w),
                self_attn: MultiHeadAttention::new(&mut p, &format!("block{b}.self.attn"), w, w, config.heads, &mut rng),
                audio,
                lips,
                guides,
                ffn_norm: LayerNorm::new(&mut p, &format!("block{b}.ffn.norm"), w),
                ffn: FeedForward::new(&mut p, &format!("block{b}.ffn"), w, config.ffn, &mut rng),
                film: Film::new(&mut p, &format!("block{b}.film"), w, w),
            });
        }
        let out_norm = LayerNorm::new(&mut p, "out.norm", w);
        let out = Linear::zeros(&mut p, "out", w, dims.sample);
        Ok(Self {
            config,
            slots,
            dims,
            params: p,
            schedule,
            input,
            step_first,
            step_second,
            audio,
            lips,
            guides,
            blocks,
            out_norm,
            out,
            sample_norm: Normalizer::identity(dims.sample),
            lip_norm: Normalizer::identity(dims.lips),
            guide_norm: Normalizer::identity(dims.guides),
            info: TrainInfo::new(seed),
        })
    }

    pub fn slots(&self) -> SlotSet {
        self.slots
    }

    pub fn dims(&self) -> StreamDims {
        self.dims
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_bundle(&self, cond: &ConditioningBundle<'_, T>) -> Result<()> {
        if cond.slots() != self.slots {
            return Err(Error::invalid(format!(
                "conditioning slots {:?} do not match the model's {:?}",
                cond.slots(),
                self.slots
            )));
        }
        Ok(())
    }

    fn audio_context(&self, g: &mut Graph<'_, T>, slot: Slot<'_, AudioFeatures<T>>, frames: usize, offset: usize) -> Result<Context> {
        let enc = self.audio.as_ref().expect("audio slot enabled");
        match slot {
            Slot::Null => Ok(Context {
                rows: g.param(enc.null),
                mask: None,
            }),
            Slot::Given(audio) => {
                if audio.frames() < frames {
                    return Err(Error::shape(format!("audio has {} frames, the sample {frames}", audio.frames())));
                }
                if audio.feature_dim() != self.dims.audio {
                    return Err(Error::shape(format!("audio width {} differs from the model's {}", audio.feature_dim(), self.dims.audio)));
                }
                let rows = audio.frame_matrix().slice(s![..frames, ..]).to_owned();
                let rows = enc.encode(g, rows, &frame_positions(frames, offset));
                let idx: Vec<usize> = (0..frames).collect();
                Ok(Context {
                    rows,
                    mask: Some(band_mask(&idx, &idx, self.config.band)),
                })
            }
        }
    }

    fn lip_context(&self, g: &mut Graph<'_, T>, slot: Slot<'_, LipSequence<T>>, frames: usize, offset: usize) -> Result<Context> {
        let enc = self.lips.as_ref().expect("lip slot enabled");
        match slot {
            Slot::Null => Ok(Context {
                rows: g.param(enc.null),
                mask: None,
            }),
            Slot::Given(lips) => {
                if lips.len() < frames || lips.dim() != self.dims.lips {
                    return Err(Error::shape(format!(
                        "lip track is {}x{}, the model needs {frames}x{}",
                        lips.len(),
                        lips.dim(),
                        self.dims.lips
                    )));
                }
                let rows = self.lip_norm.apply(lips.frames().slice(s![..frames, ..]));
                let rows = enc.encode(g, rows, &frame_positions(frames, offset));
                let idx: Vec<usize> = (0..frames).collect();
                Ok(Context {
                    rows,
                    mask: Some(band_mask(&idx, &idx, self.config.band)),
                })
            }
        }
    }

    fn guide_context(&self, g: &mut Graph<'_, T>, slot: Slot<'_, GuidePoseSequence<T>>, frames: usize, offset: usize) -> Result<Context> {
        let enc = self.guides.as_ref().expect("guide slot enabled");
        match slot {
            Slot::Null => Ok(Context {
                rows: g.param(enc.null),
                mask: None,
            }),
            Slot::Given(guides) => {
                if guides.dim() != self.dims.guides {
                    return Err(Error::shape(format!("guide poses have {} angles, the model {}", guides.dim(), self.dims.guides)));
                }
                let at = guides.frame_indices();
                if at.last().is_some_and(|&f| f >= frames) {
                    return Err(Error::shape(format!("{} guide poses do not fit in {frames} frames", guides.count())));
                }
                let positions: Vec<f64> = at.iter().map(|&f| (f + offset) as f64).collect();
                let rows = self.guide_norm.apply(guides.poses());
                let idx: Vec<usize> = (0..frames).collect();
                Ok(Context {
                    rows: enc.encode(g, rows, &positions),
                    mask: (self.config.guide_band > 0).then(|| band_mask(&idx, &at, self.config.guide_band)),
                })
            }
        }
    }

    /// Builds the prediction of normalised `x_0` for normalised `x_τ`.
    pub(crate) fn forward(&self, g: &mut Graph<'_, T>, x_t: Array2<T>, tau: usize, cond: &ConditioningBundle<'_, T>, offset: usize) -> Result<Var> {
        self.check_bundle(cond)?;
        let frames = x_t.nrows();
        if x_t.ncols() != self.dims.sample {
            return Err(Error::shape(format!("sample width {} differs from the model's {}", x_t.ncols(), self.dims.sample)));
        }
        let w = self.config.width;
        let x = g.constant(x_t);
        let last = frames - 1;
        let prev = g.gather_rows(x, (0..frames).map(|t| Some(t.saturating_sub(1))).collect());
        let next = g.gather_rows(x, (0..frames).map(|t| Some((t + 1).min(last))).collect());
        let stacked = g.concat_cols(&[prev, x, next]);
        let h = self.input.forward(g, stacked);
        let pe = g.constant(sinusoidal(&frame_positions(frames, offset), w));
        let mut h = g.add(h, pe);

        let te = g.constant(sinusoidal(&[tau as f64], w));
        let te = self.step_first.forward(g, te);
        let te = g.silu(te);
        let temb = self.step_second.forward(g, te);

        let audio = cond.audio.map(|s| self.audio_context(g, s, frames, offset)).transpose()?;
        let lips = cond.lips.map(|s| self.lip_context(g, s, frames, offset)).transpose()?;
        let guides = cond.guides.map(|s| self.guide_context(g, s, frames, offset)).transpose()?;

        for block in &self.blocks {
            let n = block.self_norm.forward(g, h);
            let a = block.self_attn.forward(g, n, n, None);
            h = g.add(h, a);
            for (layers, ctx) in [(&block.audio, &audio), (&block.lips, &lips), (&block.guides, &guides)] {
                if let (Some(layers), Some(ctx)) = (layers, ctx) {
                    let n = layers.norm.forward(g, h);
                    let a = layers.attn.forward(g, n, ctx.rows, ctx.mask.as_ref());
                    h = g.add(h, a);
                }
            }
            let n = block.ffn_norm.forward(g, h);
            let f = block.ffn.forward(g, n);
            h = g.add(h, f);
            h = block.film.forward(g, h, temb);
        }
        let n = self.out_norm.forward(g, h);
        Ok(self.out.forward(g, n))
    }

    /// Samples a `frames × d` sequence in data units.
    pub fn sample<R: rand::Rng + ?Sized>(&self, cond: &ConditioningBundle<'_, T>, frames: usize, scale: f64, rng: &mut R) -> Result<Array2<T>> {
        if frames == 0 {
            return Err(Error::invalid("cannot sample an empty sequence"));
        }
        let steps = self.schedule.sampling_steps(self.config.sample_steps);
        let z = reverse_sample(self, cond, &self.schedule, &steps, scale, (frames, self.dims.sample), rng)?;
        Ok(self.sample_norm.invert(z.view()))
    }

    /// Gradient-descent training on examples produced by `draw`, which returns an x0 sequence in
    /// data units, its conditioning and a position offset.
    pub(crate) fn fit<F>(&mut self, name: &str, seed: u64, mut draw: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<(Array2<T>, OwnedConditioning<T>, usize)>,
    {
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6466_6675_7369_6f6e);
        let mut opt = Adam::new(cfg.adam, &self.params);
        let mut log = LossLog::new(cfg.log_every);
        let inv = T::one() / T::lit_usize(cfg.batch);
        for step in 0..cfg.steps {
            let mut grads = Gradients::zeros_like(&self.params);
            let mut total = 0.0;
            for _ in 0..cfg.batch {
                let (x0, owned, offset) = draw(&mut rng)?;
                let x0 = self.sample_norm.apply(x0.view());
                let bundle = owned.bundle(self.slots);
                let ex = draw_training_example(x0.view(), &bundle, &self.schedule, cfg.cond_drop_prob, &mut rng);
                let mut g = Graph::new(&self.params);
                let pred = self.forward(&mut g, ex.x_t, ex.tau, &ex.cond, offset)?;
                let target = g.constant(x0);
                let loss = g.mse(pred, target);
                total += g.scalar(loss).as_f64();
                let loss = g.scale(loss, inv);
                g.backward(loss, &mut grads);
            }
            log.push(name, step, total / cfg.batch as f64)?;
            opt.step(&mut self.params, &mut grads);
        }
        if !self.params.is_finite() {
            return Err(Error::Diverged {
                model: name.into(),
                step: cfg.steps,
            });
        }
        self.info.step = cfg.steps;
        self.info.losses = log.finish();
        Ok(())
    }

    fn buffers(&self) -> ParamStore<T> {
        let mut b = ParamStore::new();
        self.sample_norm.register(&mut b, "sample_norm");
        self.lip_norm.register(&mut b, "lip_norm");
        self.guide_norm.register(&mut b, "guide_norm");
        let ab: Vec<T> = (0..=self.schedule.steps()).map(|t| T::lit(self.schedule.alpha_bar(t))).collect();
        b.add("alpha_bar", Array2::from_shape_vec((1, ab.len()), ab).expect("row"));
        b
    }

    pub(crate) fn save_as<E: Serialize>(&self, dir: &Path, kind: &str, extra: &E) -> Result<()> {
        let manifest = Manifest::new(
            kind,
            &SavedDenoiser {
                diffusion: self.config.clone(),
                slots: self.slots,
                dims: self.dims,
                extra: serde_json::to_value(extra)?,
            },
            self.info.seed,
            self.info.step,
            self.info.losses.clone(),
        )?;
        write_checkpoint(dir, &manifest, &self.params, &self.buffers())
    }

    /// Loads a checkpoint of kind `kind`, returning the model and the extra config saved with it.
    pub(crate) fn load_as(dir: &Path, kind: &str) -> Result<(Self, serde_json::Value)> {
        let manifest = read_manifest(dir, kind)?;
        let saved: SavedDenoiser = manifest.config()?;
        let mut model = Self::new(saved.diffusion, saved.slots, saved.dims, manifest.seed)?;
        let mut buffers = model.buffers();
        read_stores(dir, &mut model.params, &mut buffers)?;
        model.sample_norm = Normalizer::from_store(&buffers, "sample_norm")?;
        model.lip_norm = Normalizer::from_store(&buffers, "lip_norm")?;
        model.guide_norm = Normalizer::from_store(&buffers, "guide_norm")?;
        let ab = buffers.value(buffers.find("alpha_bar").expect("registered"));
        let restored = NoiseSchedule::from_alpha_bar(ab.iter().map(|v| v.as_f64()).collect());
        // f32 storage rounds ᾱ; the closed form is recomputed and only the step count is checked.
        if restored.map(|s| s.steps()).unwrap_or(0) != model.schedule.steps() {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "stored noise schedule does not match the config".into(),
            });
        }
        model.info = TrainInfo {
            seed: manifest.seed,
            step: manifest.step,
            losses: manifest.losses,
        };
        Ok((model, saved.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct SavedDenoiser {
    diffusion: DiffusionConfig,
    slots: SlotSet,
    dims: StreamDims,
    extra: serde_json::Value,
}

impl<T: Scalar> X0Model<T> for Denoiser<T> {
    fn predict_x0(&self, x_t: ArrayView2<'_, T>, tau: usize, cond: &ConditioningBundle<'_, T>) -> Result<Array2<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, x_t.to_owned(), tau, cond, 0)?;
        Ok(g.value(out).to_owned())
    }
}

/// Owned conditioning data for one training example; slots the model lacks are ignored.
pub struct OwnedConditioning<T> {
    pub audio: Option<AudioFeatures<T>>,
    pub lips: Option<LipSequence<T>>,
    pub guides: Option<GuidePoseSequence<T>>,
}

impl<T> OwnedConditioning<T> {
    /// Bundle with every enabled slot given; panics if an enabled slot has no data.
    pub fn bundle(&self, slots: SlotSet) -> ConditioningBundle<'_, T> {
        fn pick<'a, X>(on: bool, x: &'a Option<X>, what: &str) -> Option<Slot<'a, X>> {
            on.then(|| Slot::Given(x.as_ref().unwrap_or_else(|| panic!("training example lacks {what}"))))
        }
        ConditioningBundle {
            audio: pick(slots.audio, &self.audio, "audio"),
            lips: pick(slots.lips, &self.lips, "lips"),
            guides: pick(slots.guides, &self.guides, "guides"),
        }
    }
}

/// Random window `[start, start+len)` with `len` uniform in `[min, max]` clipped to `frames`.
pub(crate) fn draw_window(frames: usize, min: usize, max: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    use rand::Rng;
    let hi = max.min(frames);
    let lo = min.min(hi);
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=frames - len);
    (start, len)
}
