//! Minimal dense neural-network toolkit: parameters, a reverse-mode tape,
//! standard layers, Adam, checkpoint archives and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tape;
pub mod train;

pub use layers::{
    attention_mask, embed_with_positions, sinusoidal_positions, EncoderConfig, FeedForward,
    LayerNorm, Linear, MultiHeadAttention, TransformerEncoder,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Mat, ParamId, ParamStore};
pub use sparse::Csr;
pub use tape::{softmax_rows, Tape, Var};
pub use train::{fit, FitReport, Schedule};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model width {d_model} is not divisible by {heads} heads")]
    HeadsDoNotDivide { d_model: usize, heads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
