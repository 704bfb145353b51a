use dyadmotion_nn::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.value(id).dim();
        *store.value_mut(id) = randn(r, c, rng) * 0.7;
    }
}

/// Compares backprop against central differences of `sum(f(params) ⊙ R)` for a fixed random `R`.
fn check(mut store: ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = {
        let mut g = Graph::new(&store);
        let out = f(&mut g);
        g.value(out).dim()
    };
    let weights = randn(shape.0, shape.1, &mut rng);
    let loss = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        (&g.value(out) * &weights).sum()
    };
    let mut grads = Gradients::zeros_like(&store);
    {
        let mut g = Graph::new(&store);
        let out = f(&mut g);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w);
        let total = g.sum(prod);
        g.backward(total, &mut grads);
    }
    let eps = 1e-5;
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.value(id).dim();
        for i in 0..r {
            for j in 0..c {
                let orig = store.value(id)[[i, j]];
                store.value_mut(id)[[i, j]] = orig + eps;
                let up = loss(&store);
                store.value_mut(id)[[i, j]] = orig - eps;
                let down = loss(&store);
                store.value_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id)[[i, j]];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                    "{}[{i},{j}]: numeric {numeric} vs analytic {analytic}",
                    store.name(id)
                );
            }
        }
    }
}

fn two(a: (usize, usize), b: (usize, usize)) -> (ParamStore<f64>, ParamId, ParamId) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = store.add_normal("a", a.0, a.1, 1.0, &mut rng);
    let y = store.add_normal("b", b.0, b.1, 1.0, &mut rng);
    (store, x, y)
}

#[test]
fn matmul_and_transposed_matmul() {
    let (s, a, b) = two((3, 4), (4, 5));
    check(s, |g| {
        let (a, b) = (g.param(a), g.param(b));
        g.matmul(a, b)
    });
    let (s, a, b) = two((3, 4), (6, 4));
    check(s, |g| {
        let (a, b) = (g.param(a), g.param(b));
        g.matmul_t(a, b)
    });
}

#[test]
fn elementwise_binary() {
    let (s, a, b) = two((3, 4), (3, 4));
    check(s.clone(), |g| {
        let (a, b) = (g.param(a), g.param(b));
        let s = g.add(a, b);
        let d = g.sub(s, b);
        let m = g.mul(d, b);
        g.scale(m, -1.5)
    });
    let (s, a, r) = two((5, 3), (1, 3));
    check(s, |g| {
        let (a, r) = (g.param(a), g.param(r));
        let m = g.mul_row(a, r);
        g.add_row(m, r)
    });
}

#[test]
fn activations() {
    let (s, a, _) = two((4, 6), (1, 1));
    check(s.clone(), |g| {
        let a = g.param(a);
        g.gelu(a)
    });
    check(s.clone(), |g| {
        let a = g.param(a);
        g.silu(a)
    });
    check(s.clone(), |g| {
        let a = g.param(a);
        g.tanh(a)
    });
    check(s, |g| {
        let a = g.param(a);
        g.relu(a)
    });
}

#[test]
fn softmax_with_and_without_mask() {
    let (s, a, _) = two((4, 4), (1, 1));
    check(s.clone(), |g| {
        let a = g.param(a);
        g.softmax_rows(a, None)
    });
    let mask = causal_mask(4);
    check(s, |g| {
        let a = g.param(a);
        g.softmax_rows(a, Some(&mask))
    });
}

#[test]
fn layer_norm_rows() {
    let (s, a, _) = two((3, 7), (1, 1));
    check(s, |g| {
        let a = g.param(a);
        g.layer_norm_rows(a)
    });
}

#[test]
fn structural_ops() {
    let (s, a, b) = two((4, 3), (4, 2));
    check(s.clone(), |g| {
        let (a, b) = (g.param(a), g.param(b));
        let c = g.concat_cols(&[a, b, a]);
        g.slice_cols(c, 2, 4)
    });
    let (s, a, b) = two((2, 3), (4, 3));
    check(s, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let c = g.concat_rows(&[a, b]);
        let r = g.slice_rows(c, 1, 4);
        let gathered = g.gather_rows(r, vec![Some(3), None, Some(0), Some(3)]);
        let m = g.mean_rows(gathered);
        let sum = g.sum(gathered);
        let both = g.add_row(gathered, m);
        let scaled = g.mul_row(both, m);
        let _ = sum;
        scaled
    });
}

#[test]
fn losses() {
    let (s, a, b) = two((3, 5), (3, 5));
    check(s.clone(), |g| {
        let (a, b) = (g.param(a), g.param(b));
        g.mse(a, b)
    });
    check(s, |g| {
        let a = g.param(a);
        g.cross_entropy(a, vec![4, 0, 2])
    });
}

#[test]
fn layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add_normal("x", 5, 8, 1.0, &mut rng);
    let ctx = store.add_normal("ctx", 3, 6, 1.0, &mut rng);
    let cond = store.add_normal("cond", 1, 4, 1.0, &mut rng);
    let lin = Linear::new(&mut store, "lin", 8, 8, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 8);
    let self_attn = MultiHeadAttention::new(&mut store, "self", 8, 8, 2, &mut rng);
    let cross = MultiHeadAttention::new(&mut store, "cross", 8, 6, 4, &mut rng);
    let film = Film::new(&mut store, "film", 4, 8);
    let ffn = FeedForward::new(&mut store, "ffn", 8, 12, &mut rng);
    let conv = Conv1d::causal(&mut store, "conv", 2, 8, 8, &mut rng);
    let conv3 = Conv1d::centred(&mut store, "conv3", 1, 8, 8, &mut rng);
    let emb = Embedding::new(&mut store, "emb", 6, 8, &mut rng);
    randomize(&mut store, &mut rng);
    let mask = causal_mask(5);
    check(store, |g| {
        let (x, ctx, cond) = (g.param(x), g.param(ctx), g.param(cond));
        let e = emb.forward(g, &[1, 5, 1, 0, 2]);
        let h = g.add(x, e);
        let h = lin.forward(g, h);
        let h = ln.forward(g, h);
        let a = self_attn.forward(g, h, h, Some(&mask));
        let h = g.add(h, a);
        let c = cross.forward(g, h, ctx, None);
        let h = g.add(h, c);
        let h = film.forward(g, h, cond);
        let f = ffn.forward(g, h);
        let h = g.add(h, f);
        let h = conv.forward(g, h);
        conv3.forward(g, h)
    });
}

#[test]
fn masked_softmax_entries_are_exact_zeros() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64));
    let y = g.softmax_rows(x, Some(&causal_mask(3)));
    let v = g.value(y);
    assert_eq!(v[[0, 1]], 0.0);
    assert_eq!(v[[0, 2]], 0.0);
    assert_eq!(v[[1, 2]], 0.0);
    assert_eq!(v[[0, 0]], 1.0);
    for row in v.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradients_accumulate_across_graphs() {
    let (store, a, b) = two((2, 2), (2, 2));
    let run = |grads: &mut Gradients<f64>| {
        let mut g = Graph::new(&store);
        let (x, y) = (g.param(a), g.param(b));
        let l = g.mse(x, y);
        g.backward(l, grads);
    };
    let mut once = Gradients::zeros_like(&store);
    run(&mut once);
    let mut twice = Gradients::zeros_like(&store);
    run(&mut twice);
    run(&mut twice);
    assert_eq!(twice.get(a), &(once.get(a) * 2.0));
}

#[test]
fn adam_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
    let x = randn(32, 3, &mut rng);
    let truth = ndarray::array![[1.0, -2.0], [0.5, 0.0], [0.0, 3.0]];
    let y = x.dot(&truth);
    let mut opt = Adam::new(AdamConfig { lr: 0.05, warmup: 0, ..Default::default() }, &store);
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let mut grads = Gradients::zeros_like(&store);
        let mut g = Graph::new(&store);
        let xi = g.constant(x.clone());
        let yi = g.constant(y.clone());
        let p = lin.forward(&mut g, xi);
        let l = g.mse(p, yi);
        last = g.scalar(l);
        g.backward(l, &mut grads);
        drop(g);
        opt.step(&mut store, &mut grads);
    }
    assert!(last < 1e-4, "{last}");
}

#[test]
fn weights_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    Linear::new(&mut store, "a", 4, 3, &mut rng);
    LayerNorm::new(&mut store, "n", 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    store.save(&path).unwrap();
    let mut other = ParamStore::<f32>::new();
    Linear::new(&mut other, "a", 4, 3, &mut ChaCha8Rng::seed_from_u64(7));
    LayerNorm::new(&mut other, "n", 3);
    assert_ne!(other, store);
    other.load_from(&path).unwrap();
    assert_eq!(other, store);
    let mut wrong = ParamStore::<f32>::new();
    Linear::new(&mut wrong, "a", 4, 2, &mut rng);
    LayerNorm::new(&mut wrong, "n", 3);
    assert!(wrong.load_from(&path).is_err());
}

#[test]
fn sinusoidal_embedding_layout() {
    let e: Array2<f64> = sinusoidal(&[0.0, 1.0], 8);
    assert_eq!(e.dim(), (2, 8));
    assert_eq!(e[[0, 0]], 0.0);
    assert_eq!(e[[0, 4]], 1.0);
    assert!((e[[1, 0]] - 1f64.sin()).abs() < 1e-15);
}
