//! Building blocks: linear maps, normalisation, embeddings, attention, FiLM and 1-D convolutions.

use dyadmotion_core::Scalar;
use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weights `~ N(0, 1/inputs)`, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_std(store, name, inputs, outputs, (1.0 / inputs as f64).sqrt(), rng)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), inputs, outputs, std, rng);
        let b = Some(store.add_zeros(format!("{name}.b"), 1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), inputs, outputs);
        let b = Some(store.add_zeros(format!("{name}.b"), 1, outputs));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, width),
            beta: store.add_zeros(format!("{name}.beta"), 1, width),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, count: usize, width: usize, rng: &mut R) -> Self {
        Self {
            table: store.add_normal(format!("{name}.table"), count, width, 0.02, rng),
            count,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, index: &[usize]) -> Var {
        assert!(index.iter().all(|&i| i < self.count), "embedding index out of range");
        let table = g.param(self.table);
        g.gather_rows(table, index.iter().map(|&i| Some(i)).collect())
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_width, width, rng),
            o: Linear::with_std(store, &format!("{name}.o"), width, width, 0.02, rng),
            heads,
            width,
        }
    }

    pub fn project_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, context: Var) -> (Var, Var) {
        (self.k.forward(g, context), self.v.forward(g, context))
    }

    /// Attends from `x` to already projected keys and values.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, k: Var, v: Var, mask: Option<&Array2<bool>>) -> Var {
        let q = self.q.forward(g, x);
        let dh = self.width / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, mask);
            outs.push(g.matmul(p, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, joined)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, context: Var, mask: Option<&Array2<bool>>) -> Var {
        let (k, v) = self.project_kv(g, context);
        self.attend(g, x, k, v, mask)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::with_std(store, &format!("{name}.down"), hidden, width, 0.02, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Feature-wise linear modulation: `x ⊙ (1 + γ(c)) + β(c)` for a `1 × d_c` condition row.
/// Starts as the identity (zero-initialised projection).
#[derive(Clone, Debug)]
pub struct Film {
    proj: Linear,
    width: usize,
}

impl Film {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cond_width: usize, width: usize) -> Self {
        Self {
            proj: Linear::zeros(store, &format!("{name}.proj"), cond_width, 2 * width),
            width,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var) -> Var {
        let gb = self.proj.forward(g, cond);
        let gamma = g.slice_cols(gb, 0, self.width);
        let beta = g.slice_cols(gb, self.width, self.width);
        let scaled = g.mul_row(x, gamma);
        let y = g.add(x, scaled);
        g.add_row(y, beta)
    }
}

/// 1-D convolution over rows (time) with arbitrary integer tap offsets. Out-of-range taps repeat
/// the nearest edge row.
#[derive(Clone, Debug)]
pub struct Conv1d {
    taps: Vec<isize>,
    lin: Linear,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        taps: Vec<isize>,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::new(store, name, inputs * taps.len(), outputs, rng);
        Self { taps, lin }
    }

    /// Kernel size 2 looking back `dilation` steps: taps `[−dilation, 0]`.
    pub fn causal<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dilation: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, vec![-(dilation as isize), 0], inputs, outputs, rng)
    }

    /// Kernel size 3 centred: taps `[−dilation, 0, dilation]`.
    pub fn centred<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dilation: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let d = dilation as isize;
        Self::new(store, name, vec![-d, 0, d], inputs, outputs, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let rows = g.value(x).nrows() as isize;
        let shifted: Vec<Var> = self
            .taps
            .iter()
            .map(|&off| {
                if off == 0 {
                    x
                } else {
                    let index = (0..rows).map(|t| Some((t + off).clamp(0, rows - 1) as usize)).collect();
                    g.gather_rows(x, index)
                }
            })
            .collect();
        let stacked = if shifted.len() == 1 { shifted[0] } else { g.concat_cols(&shifted) };
        self.lin.forward(g, stacked)
    }
}
