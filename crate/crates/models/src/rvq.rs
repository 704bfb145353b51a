//! Residual VQ-VAE over guide-pose sequences.
//!
//! The encoder and decoder are stacks of causal kernel-2 convolutions with dilations 1, 2, 4
//! (receptive field 8 steps, edge-padded on the left). Each timestep's 64-d latent is quantized by
//! `N` codebooks in turn, each one quantizing the residual the previous level left behind. Codebooks
//! are learned by exponential moving averages of their assigned residuals. Entry 0 of every
//! codebook starts at the zero vector and stays there on levels 2..N, so a refinement level can
//! never increase the residual norm; on level 1 it trains like any other entry, which keeps all
//! `C` entries available to the coarsest level.

use dyadmotion_core::sequence::{subsample_with_stride, GuidePoseSequence, MotionSequence};
use dyadmotion_core::{Error, FrameSeq, Result, Scalar};
use dyadmotion_nn::{Adam, AdamConfig, Conv1d, Gradients, Graph, Linear, ParamStore, Var};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{read_manifest, read_stores, write_checkpoint, LossLog, Manifest};
use crate::norm::Normalizer;
use crate::TrainInfo;

pub const MODEL_KIND: &str = "rvq";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqConfig {
    pub codebook_size: usize,
    pub embedding_dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub dilations: Vec<usize>,
    pub beta: f64,
    pub ema_decay: f64,
    /// Steps without any assignment after which a codebook entry is reseeded.
    pub dead_after: usize,
    pub steps: usize,
    /// Training crops per step.
    pub batch: usize,
    /// Guide timesteps per training crop.
    pub window: usize,
    /// Motion frames between consecutive tokenized poses (30 for guide poses).
    pub stride: usize,
    /// Lower bound on per-dimension standard deviations used for normalisation (radians).
    pub std_floor: f64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            embedding_dim: 64,
            depth: 4,
            hidden: 128,
            dilations: vec![1, 2, 4],
            beta: 0.25,
            ema_decay: 0.99,
            dead_after: 200,
            steps: 20_000,
            batch: 16,
            window: 16,
            stride: 30,
            std_floor: 0.05,
            log_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook size must be at least 2"));
        }
        if self.depth < 1 {
            return Err(Error::invalid("residual depth must be at least 1"));
        }
        if self.embedding_dim == 0 || self.hidden == 0 || self.batch == 0 || self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("rvq sizes must be positive"));
        }
        Ok(())
    }

    /// Timesteps each latent can see, including itself.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().sum::<usize>()
    }
}

/// `K·N` codebook indices, flattened row-major over (timestep, level).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    depth: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, depth: usize) -> Result<Self> {
        if depth == 0 || tokens.len() % depth != 0 {
            return Err(Error::shape(format!("{} tokens do not divide into levels of {depth}", tokens.len())));
        }
        Ok(Self { tokens, depth })
    }

    /// Flattens a `K × N` index grid.
    pub fn from_grid(grid: &[Vec<usize>]) -> Result<Self> {
        let depth = grid.first().map_or(0, Vec::len);
        if grid.iter().any(|row| row.len() != depth) {
            return Err(Error::shape("ragged token grid"));
        }
        Self::new(grid.concat(), depth)
    }

    pub fn grid(&self) -> Vec<Vec<usize>> {
        self.tokens.chunks(self.depth).map(<[usize]>::to_vec).collect()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() / self.depth
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Result of quantizing a batch of latent rows.
pub struct Quantized<T> {
    /// `rows × levels` codebook indices.
    pub indices: Vec<Vec<usize>>,
    /// Sum of the selected entries per row.
    pub quantized: Array2<T>,
    /// The residual each level quantized, per level (`r_{n−1}` rows).
    pub residual_inputs: Vec<Array2<T>>,
}

/// Greedy residual quantization of every row of `latents` against `codebooks`.
///
/// Level `n` picks the entry nearest to the residual left by levels `< n`; ties go to the lowest
/// index.
pub fn quantize_rows<T: Scalar>(latents: ArrayView2<'_, T>, codebooks: &[Array2<T>]) -> Quantized<T> {
    let rows = latents.nrows();
    let mut residual = latents.to_owned();
    let mut quantized = Array2::zeros(latents.dim());
    let mut indices = vec![Vec::with_capacity(codebooks.len()); rows];
    let mut residual_inputs = Vec::with_capacity(codebooks.len());
    for book in codebooks {
        let norms: Array1<T> = book.rows().into_iter().map(|e| e.dot(&e)).collect();
        let cross = residual.dot(&book.t());
        for (i, row) in cross.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = T::infinity();
            for (c, (&x, &n)) in row.iter().zip(norms.iter()).enumerate() {
                let d = n - (x + x);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            indices[i].push(best);
        }
        residual_inputs.push(residual.clone());
        for (i, idx) in indices.iter().enumerate() {
            let e = book.row(*idx.last().expect("one index per level"));
            let mut r = residual.row_mut(i);
            r -= &e;
            let mut q = quantized.row_mut(i);
            q += &e;
        }
    }
    Quantized {
        indices,
        quantized,
        residual_inputs,
    }
}

/// Residual quantization of one latent vector: `(indices, Σ selected entries)`.
pub fn quantize_residual<T: Scalar>(latent: ArrayView1<'_, T>, codebooks: &[Array2<T>]) -> (Vec<usize>, Array1<T>) {
    let q = quantize_rows(latent.insert_axis(Axis(0)), codebooks);
    (q.indices.into_iter().next().expect("one row"), q.quantized.row(0).to_owned())
}

#[derive(Clone, Debug)]
struct ConvStack {
    input: Linear,
    convs: Vec<Conv1d>,
    output: Linear,
}

impl ConvStack {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, hidden: usize, outputs: usize, dilations: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.in"), inputs, hidden, rng),
            convs: dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| Conv1d::causal(store, &format!("{name}.conv{i}"), d, hidden, hidden, rng))
                .collect(),
            output: Linear::new(store, &format!("{name}.out"), hidden, outputs, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut h = self.input.forward(g, x);
        for conv in &self.convs {
            let c = conv.forward(g, h);
            let c = g.relu(c);
            h = g.add(h, c);
        }
        self.output.forward(g, h)
    }
}

pub struct RvqModel<T: Scalar> {
    pub config: RvqConfig,
    pose_dim: usize,
    params: ParamStore<T>,
    encoder: ConvStack,
    decoder: ConvStack,
    codebooks: Vec<Array2<T>>,
    norm: Normalizer<T>,
    pub info: TrainInfo,
}

impl<T: Scalar> RvqModel<T> {
    /// Untrained model with randomly initialised networks and zero codebooks.
    pub fn new(config: RvqConfig, pose_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, d) = (config.hidden, config.embedding_dim);
        let encoder = ConvStack::new(&mut params, "enc", pose_dim, h, d, &config.dilations, &mut rng);
        let decoder = ConvStack::new(&mut params, "dec", d, h, pose_dim, &config.dilations, &mut rng);
        let codebooks = vec![Array2::zeros((config.codebook_size, d)); config.depth];
        Ok(Self {
            config,
            pose_dim,
            params,
            encoder,
            decoder,
            codebooks,
            norm: Normalizer::identity(pose_dim),
            info: TrainInfo::new(seed),
        })
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn codebooks(&self) -> &[Array2<T>] {
        &self.codebooks
    }

    pub fn set_codebooks(&mut self, codebooks: Vec<Array2<T>>) -> Result<()> {
        let (c, d) = (self.config.codebook_size, self.config.embedding_dim);
        if codebooks.len() != self.config.depth || codebooks.iter().any(|b| b.dim() != (c, d)) {
            return Err(Error::shape(format!("expected {} codebooks of {c}x{d}", self.config.depth)));
        }
        self.codebooks = codebooks;
        Ok(())
    }

    pub fn normalizer(&self) -> &Normalizer<T> {
        &self.norm
    }

    fn check_poses(&self, poses: ArrayView2<'_, T>) -> Result<()> {
        if poses.ncols() != self.pose_dim {
            return Err(Error::shape(format!(
                "guide poses have {} angles, the model was built for {}",
                poses.ncols(),
                self.pose_dim
            )));
        }
        Ok(())
    }

    /// Latents (`K × embedding_dim`) for already normalised poses.
    fn encode_normalized(&self, x: Array2<T>) -> Array2<T> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(x);
        let z = self.encoder.forward(&mut g, x);
        g.value(z).to_owned()
    }

    fn decode_latent(&self, z: Array2<T>) -> Array2<T> {
        let mut g = Graph::new(&self.params);
        let z = g.constant(z);
        let y = self.decoder.forward(&mut g, z);
        g.value(y).to_owned()
    }

    pub fn encode(&self, guides: &GuidePoseSequence<T>) -> Result<Array2<T>> {
        self.check_poses(guides.poses())?;
        Ok(self.encode_normalized(self.norm.apply(guides.poses())))
    }

    pub fn tokenize(&self, guides: &GuidePoseSequence<T>) -> Result<TokenSequence> {
        let z = self.encode(guides)?;
        let q = quantize_rows(z.view(), &self.codebooks);
        TokenSequence::from_grid(&q.indices)
    }

    /// Tokens of the guide poses subsampled from `motion` at this model's stride.
    pub fn tokenize_motion(&self, motion: &MotionSequence<T>) -> Result<TokenSequence> {
        self.tokenize(&subsample_with_stride(motion, self.config.stride)?)
    }

    fn latent_from_tokens(&self, tokens: &TokenSequence, levels: usize) -> Result<Array2<T>> {
        if tokens.depth() != self.config.depth {
            return Err(Error::shape(format!(
                "token depth {} does not match model depth {}",
                tokens.depth(),
                self.config.depth
            )));
        }
        if let Some(&bad) = tokens.tokens().iter().find(|&&i| i >= self.config.codebook_size) {
            return Err(Error::InvalidToken {
                index: bad,
                size: self.config.codebook_size,
            });
        }
        if tokens.is_empty() {
            return Err(Error::shape("cannot decode an empty token sequence"));
        }
        let mut z = Array2::zeros((tokens.steps(), self.config.embedding_dim));
        for (k, row) in tokens.grid().iter().enumerate() {
            for (n, &idx) in row.iter().take(levels).enumerate() {
                let mut zr = z.row_mut(k);
                zr += &self.codebooks[n].row(idx);
            }
        }
        Ok(z)
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<GuidePoseSequence<T>> {
        self.decode_levels(tokens, self.config.depth)
    }

    /// Decodes using only the first `levels` residual levels.
    pub fn decode_levels(&self, tokens: &TokenSequence, levels: usize) -> Result<GuidePoseSequence<T>> {
        let z = self.latent_from_tokens(tokens, levels)?;
        let y = self.norm.invert(self.decode_latent(z).view());
        GuidePoseSequence::with_stride(y, self.config.stride)
    }

    /// Mean squared reconstruction error in normalised pose space over `corpus`, using `levels`
    /// active residual levels.
    pub fn reconstruction_mse(&self, corpus: &[GuidePoseSequence<T>], levels: usize) -> Result<f64> {
        let levels = levels.clamp(1, self.config.depth);
        let (mut total, mut count) = (0.0, 0usize);
        for guides in corpus {
            self.check_poses(guides.poses())?;
            let x = self.norm.apply(guides.poses());
            let z = self.encode_normalized(x.clone());
            let q = quantize_rows(z.view(), &self.codebooks[..levels]);
            let y = self.decode_latent(q.quantized);
            total += (&y - &x).iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            count += x.len();
        }
        Ok(total / count.max(1) as f64)
    }

    fn buffers(&self) -> ParamStore<T> {
        let mut b = ParamStore::new();
        self.norm.register(&mut b, "norm");
        for (n, book) in self.codebooks.iter().enumerate() {
            b.add(format!("codebook{n}"), book.clone());
        }
        b
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Saved<'a> {
            rvq: &'a RvqConfig,
            pose_dim: usize,
        }
        let manifest = Manifest::new(
            MODEL_KIND,
            &Saved {
                rvq: &self.config,
                pose_dim: self.pose_dim,
            },
            self.info.seed,
            self.info.step,
            self.info.losses.clone(),
        )?;
        write_checkpoint(dir, &manifest, &self.params, &self.buffers())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Saved {
            rvq: RvqConfig,
            pose_dim: usize,
        }
        let manifest = read_manifest(dir, MODEL_KIND)?;
        let saved: Saved = manifest.config()?;
        let mut model = Self::new(saved.rvq, saved.pose_dim, manifest.seed)?;
        let mut buffers = model.buffers();
        read_stores(dir, &mut model.params, &mut buffers)?;
        model.norm = Normalizer::from_store(&buffers, "norm")?;
        for (n, book) in model.codebooks.iter_mut().enumerate() {
            *book = buffers.value(buffers.find(&format!("codebook{n}")).expect("registered")).clone();
        }
        model.info = TrainInfo {
            seed: manifest.seed,
            step: manifest.step,
            losses: manifest.losses,
        };
        Ok(model)
    }
}

/// EMA statistics for one codebook level.
struct LevelStats {
    size: Array1<f64>,
    sum: Array2<f64>,
    last_used: Vec<usize>,
}

fn random_row<T: Scalar>(rows: ArrayView2<'_, T>, rng: &mut ChaCha8Rng, jitter: f64) -> Array1<T> {
    let i = rng.random_range(0..rows.nrows());
    rows.row(i).mapv(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + T::lit(jitter * z)
    })
}

fn random_crop<'a, T: Scalar>(seq: &'a GuidePoseSequence<T>, window: usize, rng: &mut ChaCha8Rng) -> ArrayView2<'a, T> {
    let k = seq.count();
    let len = window.min(k);
    let start = rng.random_range(0..=k - len);
    seq.poses().slice_move(s![start..start + len, ..])
}

/// Trains encoder and decoder by gradient descent on reconstruction + β·commitment, and the
/// codebooks by EMA with dead-entry reseeding.
pub fn train_rvq<T: Scalar>(corpus: &[GuidePoseSequence<T>], config: &RvqConfig, seed: u64) -> Result<RvqModel<T>> {
    let first = corpus.first().ok_or_else(|| Error::invalid("rvq training corpus is empty"))?;
    let pose_dim = first.dim();
    let mut model = RvqModel::new(config.clone(), pose_dim, seed)?;
    let views: Vec<_> = corpus.iter().map(|g| g.poses()).collect();
    if views.iter().any(|v| v.ncols() != pose_dim) {
        return Err(Error::shape("guide sequences differ in pose dimension"));
    }
    model.norm = Normalizer::fit(&views, config.std_floor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7271_7661_655f_7472);
    let (c, d) = (config.codebook_size, config.embedding_dim);

    // Initialise every level from residuals of real encoder outputs.
    let latents: Vec<Array2<T>> = corpus.iter().map(|g| model.encode_normalized(model.norm.apply(g.poses()))).collect();
    let all = crate::norm::stack_rows(&latents.iter().map(|l| l.view()).collect::<Vec<_>>());
    let jitter = 1e-3;
    let mut stats = Vec::with_capacity(config.depth);
    let mut residual = all.clone();
    for n in 0..config.depth {
        let mut book = Array2::zeros((c, d));
        for e in 1..c {
            book.row_mut(e).assign(&random_row(residual.view(), &mut rng, jitter));
        }
        let q = quantize_rows(residual.view(), std::slice::from_ref(&book));
        residual = &residual - &q.quantized;
        stats.push(LevelStats {
            size: Array1::ones(c),
            sum: book.mapv(|v| v.as_f64()),
            last_used: vec![0; c],
        });
        model.codebooks[n] = book;
    }

    let mut opt = Adam::new(config.adam, &model.params);
    let mut log = LossLog::new(config.log_every);
    let beta = T::lit(config.beta);
    let decay = config.ema_decay;
    for step in 0..config.steps {
        let mut grads = Gradients::zeros_like(&model.params);
        let mut level_inputs: Vec<Vec<Array2<T>>> = vec![Vec::new(); config.depth];
        let mut level_indices: Vec<Vec<usize>> = vec![Vec::new(); config.depth];
        let mut step_loss = 0.0;
        for _ in 0..config.batch {
            let seq = &corpus[rng.random_range(0..corpus.len())];
            let x = model.norm.apply(random_crop(seq, config.window, &mut rng));
            let mut g = Graph::new(&model.params);
            let xv = g.constant(x);
            let z = model.encoder.forward(&mut g, xv);
            let q = quantize_rows(g.value(z), &model.codebooks);
            let shift = &q.quantized - &g.value(z);
            let shift = g.constant(shift);
            let z_q = g.add(z, shift);
            let y = model.decoder.forward(&mut g, z_q);
            let recon = g.mse(y, xv);
            let target = g.constant(q.quantized.clone());
            let commit = g.mse(z, target);
            let commit = g.scale(commit, beta);
            let loss = g.add(recon, commit);
            step_loss += g.scalar(loss).as_f64();
            let inv = T::one() / T::lit_usize(config.batch);
            let loss = g.scale(loss, inv);
            g.backward(loss, &mut grads);
            for (n, inputs) in q.residual_inputs.into_iter().enumerate() {
                level_inputs[n].push(inputs);
                level_indices[n].extend(q.indices.iter().map(|row| row[n]));
            }
        }
        log.push("rvq", step, step_loss / config.batch as f64)?;
        opt.step(&mut model.params, &mut grads);

        for n in 0..config.depth {
            let inputs = crate::norm::stack_rows(&level_inputs[n].iter().map(|a| a.view()).collect::<Vec<_>>());
            let st = &mut stats[n];
            let mut counts = Array1::<f64>::zeros(c);
            let mut sums = Array2::<f64>::zeros((c, d));
            for (row, &idx) in inputs.rows().into_iter().zip(&level_indices[n]) {
                counts[idx] += 1.0;
                let mut s = sums.row_mut(idx);
                s.zip_mut_with(&row, |a, &b| *a += b.as_f64());
                st.last_used[idx] = step;
            }
            st.size = &st.size * decay + &(counts * (1.0 - decay));
            st.sum = &st.sum * decay + &(sums * (1.0 - decay));
            let total: f64 = st.size.sum();
            let book = &mut model.codebooks[n];
            let first_free = if n == 0 { 0 } else { 1 };
            for e in first_free..c {
                if step.saturating_sub(st.last_used[e]) >= config.dead_after {
                    let row = random_row(inputs.view(), &mut rng, jitter);
                    st.sum.row_mut(e).assign(&row.mapv(|v| v.as_f64()));
                    st.size[e] = 1.0;
                    st.last_used[e] = step;
                    book.row_mut(e).assign(&row);
                    continue;
                }
                let smoothed = (st.size[e] + 1e-5) / (total + c as f64 * 1e-5) * total;
                let entry = st.sum.row(e).mapv(|v| T::lit(v / smoothed));
                book.row_mut(e).assign(&entry);
            }
        }
    }
    if !model.params.is_finite() {
        return Err(Error::Diverged {
            model: "rvq".into(),
            step: config.steps,
        });
    }
    model.info.step = config.steps;
    model.info.losses = log.finish();
    Ok(model)
}
