//! Small reverse-mode autograd on `ndarray` matrices, with the layers and optimizer the motion
//! models are built from.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{band_mask, causal_mask, sinusoidal, Graph, Var};
pub use layers::{Conv1d, Embedding, FeedForward, Film, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
