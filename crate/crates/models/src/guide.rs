//! Audio-conditioned autoregressive transformer over flattened residual-VQ tokens.
//!
//! Token embeddings are summed with a learned position embedding, a learned residual-level
//! embedding and a sinusoidal embedding of the motion frame the token's pose belongs to. Two
//! causal self-attention blocks are followed by cross-attention blocks over the encoded audio;
//! every block ends in FiLM on the time-averaged audio embedding.

use dyadmotion_core::audio::AudioFeatures;
use dyadmotion_core::sequence::{subsample_with_stride, GuidePoseSequence};
use dyadmotion_core::take::Take;
use dyadmotion_core::{Error, FrameSeq, Result, Scalar};
use dyadmotion_nn::{
    causal_mask, sinusoidal, Adam, AdamConfig, Embedding, FeedForward, Film, Gradients, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, Var,
};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{read_manifest, read_stores, write_checkpoint, LossLog, Manifest};
use crate::denoiser::draw_window;
use crate::rvq::{RvqModel, TokenSequence};
use crate::TrainInfo;

pub const MODEL_KIND: &str = "guide";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideConfig {
    pub width: usize,
    pub heads: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    pub ffn: usize,
    /// Longest token sequence (size of the learned position table).
    pub max_tokens: usize,
    pub steps: usize,
    pub batch: usize,
    pub min_window: usize,
    pub max_window: usize,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for GuideConfig {
    fn default() -> Self {
        Self {
            width: 256,
            heads: 8,
            self_layers: 2,
            cross_layers: 6,
            ffn: 1024,
            max_tokens: 320,
            steps: 20_000,
            batch: 8,
            min_window: 240,
            max_window: 600,
            log_every: 100,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl GuideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.self_layers == 0 || self.cross_layers == 0 {
            return Err(Error::invalid("the guide transformer needs self- and cross-attention layers"));
        }
        if self.max_tokens == 0 || self.batch == 0 || self.ffn == 0 {
            return Err(Error::invalid("guide transformer sizes must be positive"));
        }
        if self.min_window == 0 || self.min_window > self.max_window {
            return Err(Error::invalid("guide window range is empty"));
        }
        Ok(())
    }
}

/// Vocabulary and alignment shared with the residual VQ the transformer was trained against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub codebook_size: usize,
    pub depth: usize,
    /// Motion frames per tokenized pose.
    pub stride: usize,
    pub audio_dim: usize,
}

#[derive(Clone, Debug)]
struct Block {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
    film: Film,
}

impl Block {
    fn new<T: Scalar>(p: &mut ParamStore<T>, name: &str, cfg: &GuideConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.width;
        Self {
            norm: LayerNorm::new(p, &format!("{name}.norm"), w),
            attn: MultiHeadAttention::new(p, &format!("{name}.attn"), w, w, cfg.heads, rng),
            ffn_norm: LayerNorm::new(p, &format!("{name}.ffn.norm"), w),
            ffn: FeedForward::new(p, &format!("{name}.ffn"), w, cfg.ffn, rng),
            film: Film::new(p, &format!("{name}.film"), w, w),
        }
    }

    /// Residual FFN and FiLM after the attention update.
    fn finish<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, audio_mean: Var) -> Var {
        let n = self.ffn_norm.forward(g, h);
        let f = self.ffn.forward(g, n);
        let h = g.add(h, f);
        self.film.forward(g, h, audio_mean)
    }
}

pub struct GuideTransformer<T: Scalar> {
    pub config: GuideConfig,
    pub space: TokenSpace,
    params: ParamStore<T>,
    tokens: Embedding,
    positions: Embedding,
    levels: Embedding,
    audio_in: Linear,
    audio_out: Linear,
    self_blocks: Vec<Block>,
    cross_blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
    pub info: TrainInfo,
}

impl<T: Scalar> GuideTransformer<T> {
    pub fn new(config: GuideConfig, space: TokenSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        if space.codebook_size < 2 || space.depth == 0 || space.stride == 0 {
            return Err(Error::invalid("invalid token space"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.width;
        let tokens = Embedding::new(&mut p, "tokens", space.codebook_size + 1, w, &mut rng);
        let positions = Embedding::new(&mut p, "positions", config.max_tokens, w, &mut rng);
        let levels = Embedding::new(&mut p, "levels", space.depth, w, &mut rng);
        let audio_in = Linear::new(&mut p, "audio.in", 2 * space.audio_dim, w, &mut rng);
        let audio_out = Linear::new(&mut p, "audio.out", w, w, &mut rng);
        let self_blocks = (0..config.self_layers).map(|i| Block::new(&mut p, &format!("self{i}"), &config, &mut rng)).collect();
        let cross_blocks = (0..config.cross_layers).map(|i| Block::new(&mut p, &format!("cross{i}"), &config, &mut rng)).collect();
        let out_norm = LayerNorm::new(&mut p, "out.norm", w);
        let out = Linear::with_std(&mut p, "out", w, space.codebook_size, 0.01, &mut rng);
        Ok(Self {
            config,
            space,
            params: p,
            tokens,
            positions,
            levels,
            audio_in,
            audio_out,
            self_blocks,
            cross_blocks,
            out_norm,
            out,
            info: TrainInfo::new(seed),
        })
    }

    /// Index of the begin-of-sequence token.
    pub fn bos(&self) -> usize {
        self.space.codebook_size
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.space.codebook_size) {
            return Err(Error::InvalidToken {
                index: bad,
                size: self.space.codebook_size,
            });
        }
        Ok(())
    }

    fn check_audio(&self, audio: &AudioFeatures<T>) -> Result<()> {
        if audio.feature_dim() != self.space.audio_dim {
            return Err(Error::shape(format!(
                "audio width {} differs from the transformer's {}",
                audio.feature_dim(),
                self.space.audio_dim
            )));
        }
        Ok(())
    }

    /// Encoded audio frames and their time average.
    fn encode_audio(&self, g: &mut Graph<'_, T>, audio: &AudioFeatures<T>) -> (Var, Var) {
        let x = g.constant(audio.frame_matrix());
        let h = self.audio_in.forward(g, x);
        let h = g.gelu(h);
        let h = self.audio_out.forward(g, h);
        let positions: Vec<f64> = (0..audio.frames()).map(|t| t as f64).collect();
        let pe = g.constant(sinusoidal(&positions, self.config.width));
        let enc = g.add(h, pe);
        let mean = g.mean_rows(enc);
        (enc, mean)
    }

    /// Input embeddings for positions `start..start+ids.len()`.
    fn embed(&self, g: &mut Graph<'_, T>, ids: &[usize], start: usize) -> Var {
        let n = self.space.depth;
        let pos: Vec<usize> = (start..start + ids.len()).collect();
        let lvl: Vec<usize> = pos.iter().map(|p| p % n).collect();
        let frames: Vec<f64> = pos.iter().map(|p| ((p / n + 1) * self.space.stride - 1) as f64).collect();
        let t = self.tokens.forward(g, ids);
        let p = self.positions.forward(g, &pos);
        let l = self.levels.forward(g, &lvl);
        let f = g.constant(sinusoidal(&frames, self.config.width));
        let h = g.add(t, p);
        let h = g.add(h, l);
        g.add(h, f)
    }

    /// Teacher-forced logits (`len × C`): row `p` predicts token `p` from tokens `< p` and the audio.
    fn forward(&self, g: &mut Graph<'_, T>, tokens: &[usize], audio: &AudioFeatures<T>) -> Result<Var> {
        self.check_tokens(tokens)?;
        self.check_audio(audio)?;
        let len = tokens.len();
        if len == 0 || len > self.config.max_tokens {
            return Err(Error::invalid(format!("token count {len} outside 1..={}", self.config.max_tokens)));
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(self.bos());
        ids.extend_from_slice(&tokens[..len - 1]);
        let (enc, mean) = self.encode_audio(g, audio);
        let mut h = self.embed(g, &ids, 0);
        let mask = causal_mask(len);
        for b in &self.self_blocks {
            let n = b.norm.forward(g, h);
            let a = b.attn.forward(g, n, n, Some(&mask));
            h = g.add(h, a);
            h = b.finish(g, h, mean);
        }
        for b in &self.cross_blocks {
            let n = b.norm.forward(g, h);
            let a = b.attn.forward(g, n, enc, None);
            h = g.add(h, a);
            h = b.finish(g, h, mean);
        }
        let n = self.out_norm.forward(g, h);
        Ok(self.out.forward(g, n))
    }

    /// Logits for every position of a teacher-forced pass over `tokens`.
    pub fn teacher_forced_logits(&self, tokens: &[usize], audio: &AudioFeatures<T>) -> Result<Array2<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, tokens, audio)?;
        Ok(g.value(out).to_owned())
    }

    /// Logits of the token following `prefix` (which may be empty).
    pub fn next_token_logits(&self, prefix: &[usize], audio: &AudioFeatures<T>) -> Result<Vec<f64>> {
        let mut padded = prefix.to_vec();
        padded.push(0);
        let logits = self.teacher_forced_logits(&padded, audio)?;
        Ok(logits.row(prefix.len()).iter().map(|v| v.as_f64()).collect())
    }

    /// Mean cross-entropy of `tokens` under teacher forcing.
    pub fn loss(&self, tokens: &TokenSequence, audio: &AudioFeatures<T>) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let logits = self.forward(&mut g, tokens.tokens(), audio)?;
        let loss = g.cross_entropy(logits, tokens.tokens().to_vec());
        Ok(g.scalar(loss).as_f64())
    }

    /// Starts an incremental rollout over `audio`.
    pub fn rollout<'m>(&'m self, audio: &AudioFeatures<T>) -> Result<Rollout<'m, T>> {
        self.check_audio(audio)?;
        let mut g = Graph::new(&self.params);
        let (enc, mean) = self.encode_audio(&mut g, audio);
        let cross_kv = self
            .cross_blocks
            .iter()
            .map(|b| {
                let (k, v) = b.attn.project_kv(&mut g, enc);
                (g.value(k).to_owned(), g.value(v).to_owned())
            })
            .collect();
        let audio_mean = g.value(mean).to_owned();
        Ok(Rollout {
            model: self,
            audio_mean,
            cross_kv,
            self_kv: vec![None; self.self_blocks.len()],
            tokens: Vec::new(),
        })
    }

    /// Samples `count` tokens autoregressively with nucleus sampling.
    pub fn generate_tokens<R: Rng + ?Sized>(&self, audio: &AudioFeatures<T>, count: usize, top_p: f64, rng: &mut R) -> Result<TokenSequence> {
        if count > self.config.max_tokens {
            return Err(Error::invalid(format!(
                "{count} tokens exceed the transformer's limit of {}",
                self.config.max_tokens
            )));
        }
        let mut roll = self.rollout(audio)?;
        for _ in 0..count {
            let logits = roll.next_logits()?;
            let token = nucleus_sample(&logits, top_p, rng)?;
            roll.push(token)?;
        }
        TokenSequence::new(roll.tokens, self.space.depth)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest::new(
            MODEL_KIND,
            &SavedGuide {
                guide: self.config.clone(),
                space: self.space,
            },
            self.info.seed,
            self.info.step,
            self.info.losses.clone(),
        )?;
        write_checkpoint(dir, &manifest, &self.params, &ParamStore::new())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir, MODEL_KIND)?;
        let saved: SavedGuide = manifest.config()?;
        let mut model = Self::new(saved.guide, saved.space, manifest.seed)?;
        read_stores(dir, &mut model.params, &mut ParamStore::new())?;
        model.info = TrainInfo {
            seed: manifest.seed,
            step: manifest.step,
            losses: manifest.losses,
        };
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedGuide {
    guide: GuideConfig,
    space: TokenSpace,
}

/// State of one autoregressive rollout: cached audio keys/values per cross-attention layer and
/// growing self-attention keys/values.
pub struct Rollout<'m, T: Scalar> {
    model: &'m GuideTransformer<T>,
    audio_mean: Array2<T>,
    cross_kv: Vec<(Array2<T>, Array2<T>)>,
    self_kv: Vec<Option<(Array2<T>, Array2<T>)>>,
    tokens: Vec<usize>,
}

impl<T: Scalar> Rollout<'_, T> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Logits for the next token. Does not advance the rollout.
    pub fn next_logits(&mut self) -> Result<Vec<f64>> {
        let m = self.model;
        let p = self.tokens.len();
        if p >= m.config.max_tokens {
            return Err(Error::invalid("rollout reached the maximum token count"));
        }
        let id = if p == 0 { m.bos() } else { self.tokens[p - 1] };
        let mut g = Graph::new(&m.params);
        let mean = g.constant(self.audio_mean.clone());
        let mut h = m.embed(&mut g, &[id], p);
        for (b, cache) in m.self_blocks.iter().zip(&mut self.self_kv) {
            let n = b.norm.forward(&mut g, h);
            let (k, v) = b.attn.project_kv(&mut g, n);
            let (k, v) = (g.value(k).to_owned(), g.value(v).to_owned());
            let (ks, vs) = match cache.take() {
                None => (k, v),
                Some((ks, vs)) => (
                    ndarray::concatenate(Axis(0), &[ks.view(), k.view()]).expect("same width"),
                    ndarray::concatenate(Axis(0), &[vs.view(), v.view()]).expect("same width"),
                ),
            };
            let kv = g.constant(ks.clone());
            let vv = g.constant(vs.clone());
            *cache = Some((ks, vs));
            let a = b.attn.attend(&mut g, n, kv, vv, None);
            h = g.add(h, a);
            h = b.finish(&mut g, h, mean);
        }
        for (b, (k, v)) in m.cross_blocks.iter().zip(&self.cross_kv) {
            let n = b.norm.forward(&mut g, h);
            let kv = g.constant(k.clone());
            let vv = g.constant(v.clone());
            let a = b.attn.attend(&mut g, n, kv, vv, None);
            h = g.add(h, a);
            h = b.finish(&mut g, h, mean);
        }
        let n = m.out_norm.forward(&mut g, h);
        let out = m.out.forward(&mut g, n);
        let logits = g.value(out).row(0).iter().map(|v| v.as_f64()).collect();
        Ok(logits)
    }

    /// Appends the chosen token. Must follow exactly one `next_logits` call.
    pub fn push(&mut self, token: usize) -> Result<()> {
        self.model.check_tokens(&[token])?;
        if self.self_kv.iter().any(|c| c.as_ref().map_or(0, |(k, _)| k.nrows()) != self.tokens.len() + 1) {
            return Err(Error::invalid("push must follow next_logits"));
        }
        self.tokens.push(token);
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Smallest set of tokens, in order of decreasing probability (ties to the lower index), whose
/// probabilities sum to at least `p`.
pub fn nucleus_set(logits: &[f64], p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("nucleus mass {p} outside (0, 1]")));
    }
    let probs = softmax(logits)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut cum = 0.0;
    let mut keep = 0;
    for &i in &order {
        cum += probs[i];
        keep += 1;
        if cum >= p - 1e-12 {
            break;
        }
    }
    order.truncate(keep);
    Ok(order)
}

/// Draws a token from the renormalised nucleus of `logits`. Consumes one uniform draw.
pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], p: f64, rng: &mut R) -> Result<usize> {
    let set = nucleus_set(logits, p)?;
    let probs = softmax(logits)?;
    let total: f64 = set.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for &i in &set {
        cum += probs[i];
        if u < cum {
            return Ok(i);
        }
    }
    Ok(*set.last().expect("nucleus is never empty"))
}

fn check_corpus<T: Scalar>(takes: &[Take<T>], rvq: &RvqModel<T>) -> Result<usize> {
    let first = takes.first().ok_or_else(|| Error::invalid("training corpus is empty"))?;
    for t in takes {
        t.validate()?;
        if t.audio.feature_dim() != first.audio.feature_dim() {
            return Err(Error::shape(format!("take {} differs in audio width", t.id)));
        }
        if t.motion.dim() != rvq.pose_dim() {
            return Err(Error::shape(format!("take {} pose width differs from the residual VQ", t.id)));
        }
    }
    Ok(first.audio.feature_dim())
}

/// Token space of a trained residual VQ for audio of width `audio_dim`.
pub fn token_space<T: Scalar>(rvq: &RvqModel<T>, audio_dim: usize) -> TokenSpace {
    TokenSpace {
        codebook_size: rvq.config.codebook_size,
        depth: rvq.config.depth,
        stride: rvq.config.stride,
        audio_dim,
    }
}

/// Tokens and audio of a window of `take`, or `None` when the window holds no full stride.
fn window_example<T: Scalar>(take: &Take<T>, start: usize, len: usize, rvq: &RvqModel<T>) -> Result<Option<(TokenSequence, AudioFeatures<T>)>> {
    let k = len / rvq.config.stride;
    if k == 0 {
        return Ok(None);
    }
    let len = k * rvq.config.stride;
    let motion = take.motion.slice(start, len)?;
    let tokens = rvq.tokenize(&subsample_with_stride(&motion, rvq.config.stride)?)?;
    Ok(Some((tokens, take.audio.slice(start, len)?)))
}

/// Next-token cross-entropy with teacher forcing on tokens of ground-truth guide poses from
/// random windows. The residual VQ is frozen.
pub fn train_guide_transformer<T: Scalar>(takes: &[Take<T>], rvq: &RvqModel<T>, config: &GuideConfig, seed: u64) -> Result<GuideTransformer<T>> {
    let audio_dim = check_corpus(takes, rvq)?;
    let space = token_space(rvq, audio_dim);
    let mut model = GuideTransformer::new(config.clone(), space, seed)?;
    if config.max_window / space.stride * space.depth > config.max_tokens {
        return Err(Error::invalid(format!(
            "windows of {} frames need {} tokens, above max_tokens {}",
            config.max_window,
            config.max_window / space.stride * space.depth,
            config.max_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6775_6964_65);
    let mut opt = Adam::new(config.adam, &model.params);
    let mut log = LossLog::new(config.log_every);
    let n = space.depth;
    let mut hits = vec![0usize; n];
    let mut seen = vec![0usize; n];
    let inv = T::one() / T::lit_usize(config.batch);
    for step in 0..config.steps {
        let mut grads = Gradients::zeros_like(&model.params);
        let mut total = 0.0;
        for _ in 0..config.batch {
            let take = &takes[rng.random_range(0..takes.len())];
            let (start, len) = draw_window(take.frames(), config.min_window, config.max_window, &mut rng);
            let Some((tokens, audio)) = window_example(take, start, len, rvq)? else {
                return Err(Error::AudioTooShort {
                    frames: len,
                    needed: space.stride,
                });
            };
            let mut g = Graph::new(&model.params);
            let logits = model.forward(&mut g, tokens.tokens(), &audio)?;
            for (p, row) in g.value(logits).rows().into_iter().enumerate() {
                let best = argmax(row.iter().map(|v| v.as_f64()));
                seen[p % n] += 1;
                hits[p % n] += usize::from(best == tokens.tokens()[p]);
            }
            let loss = g.cross_entropy(logits, tokens.tokens().to_vec());
            total += g.scalar(loss).as_f64();
            let loss = g.scale(loss, inv);
            g.backward(loss, &mut grads);
        }
        log.push("guide", step, total / config.batch as f64)?;
        opt.step(&mut model.params, &mut grads);
        if (step + 1) % config.log_every.max(1) == 0 {
            let acc: Vec<String> = hits.iter().zip(&seen).map(|(h, s)| format!("{:.3}", *h as f64 / (*s).max(1) as f64)).collect();
            log::info!("guide step {}: per-level accuracy [{}]", step + 1, acc.join(", "));
            hits.iter_mut().for_each(|h| *h = 0);
            seen.iter_mut().for_each(|s| *s = 0);
        }
    }
    if !model.params.is_finite() {
        return Err(Error::Diverged {
            model: "guide".into(),
            step: config.steps,
        });
    }
    model.info.step = config.steps;
    model.info.losses = log.finish();
    Ok(model)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Teacher-forced argmax accuracy over the longest token-budget prefix of every take: overall and
/// per residual level.
pub fn token_accuracy<T: Scalar>(takes: &[Take<T>], rvq: &RvqModel<T>, model: &GuideTransformer<T>) -> Result<(f64, Vec<f64>)> {
    let n = model.space.depth;
    let mut hits = vec![0usize; n];
    let mut seen = vec![0usize; n];
    let max_frames = model.config.max_tokens / n * model.space.stride;
    for take in takes {
        let len = take.frames().min(max_frames);
        let Some((tokens, audio)) = window_example(take, 0, len, rvq)? else {
            continue;
        };
        let logits = model.teacher_forced_logits(tokens.tokens(), &audio)?;
        for (p, row) in logits.rows().into_iter().enumerate() {
            seen[p % n] += 1;
            hits[p % n] += usize::from(argmax(row.iter().map(|v| v.as_f64())) == tokens.tokens()[p]);
        }
    }
    let per: Vec<f64> = hits.iter().zip(&seen).map(|(h, s)| *h as f64 / (*s).max(1) as f64).collect();
    let overall = hits.iter().sum::<usize>() as f64 / seen.iter().sum::<usize>().max(1) as f64;
    Ok((overall, per))
}

/// Samples `K·N` tokens for `K = ⌊T/stride⌋` and decodes them into `K` guide poses.
pub fn generate_guide_poses<T: Scalar, R: Rng + ?Sized>(
    audio: &AudioFeatures<T>,
    model: &GuideTransformer<T>,
    rvq: &RvqModel<T>,
    top_p: f64,
    rng: &mut R,
) -> Result<GuidePoseSequence<T>> {
    let tokens = sample_guide_tokens(audio, model, rvq, top_p, rng)?;
    rvq.decode(&tokens)
}

/// The token half of [`generate_guide_poses`].
pub fn sample_guide_tokens<T: Scalar, R: Rng + ?Sized>(
    audio: &AudioFeatures<T>,
    model: &GuideTransformer<T>,
    rvq: &RvqModel<T>,
    top_p: f64,
    rng: &mut R,
) -> Result<TokenSequence> {
    let expected = token_space(rvq, model.space.audio_dim);
    if expected != model.space {
        return Err(Error::invalid(format!(
            "transformer token space {:?} does not match the residual VQ {:?}",
            model.space, expected
        )));
    }
    let stride = model.space.stride;
    let k = audio.frames() / stride;
    if k == 0 {
        return Err(Error::AudioTooShort {
            frames: audio.frames(),
            needed: stride,
        });
    }
    let audio = audio.slice(0, k * stride)?;
    model.generate_tokens(&audio, k * model.space.depth, top_p, rng)
}
