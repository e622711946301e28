//! Cross-modal attention encoder, probe head and classifier head.
//!
//! Everything runs on plain `ndarray` matrices with hand-written reverse-mode
//! gradients. The network is generic over [`Real`] so training can run in
//! `f32` while gradient checks run in `f64`.
//!
//! Time runs along rows: an EEG window enters as `[C × L]` CSP features and
//! is transposed to `[L × C]` before the input projection, so every stream
//! inside the encoder is `[L × d_model]`.

mod grad;
mod layers;
mod network;
mod params;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use thiserror::Error;

pub use grad::{compute_gradients, BatchOutputs, GradientResult, LossSelector, ViewBatch};
pub use layers::{layer_norm, multi_head_attention, multi_head_attention_weights, positional_encoding, LN_EPS};
pub use network::{
    classifier_forward, cmaa_encode, cross_attention_block, probe_forward, EncoderTrace, ExampleInput, Outputs,
};
pub use params::{Attention, Block, LayerNormParams, Linear, ModelParams};

/// Floating point type the network runs in.
pub trait Real: NdFloat + FromPrimitive + Default + std::iter::Sum {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in `{tensor}`")]
    NumericalFailure { tensor: String },
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_repr: usize,
    pub probe_hidden: usize,
    /// Classifier layer widths; the last one is the number of classes.
    pub clf_dims: Vec<usize>,
    /// Samples per decision window.
    pub window_len: usize,
    pub in_channels: usize,
    /// Add the sinusoidal encoding to both projected input streams before the
    /// first block, in addition to the per-block encoding.
    pub input_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 320,
            n_heads: 8,
            n_blocks: 5,
            d_repr: 50,
            probe_hidden: 25,
            clf_dims: vec![100, 50, 2],
            window_len: 128,
            in_channels: 64,
            input_pe: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("positional encoding needs an even d_model, got {}", self.d_model));
        }
        if self.clf_dims.last() != Some(&2) {
            return fail(format!("classifier must end in 2 outputs, got {:?}", self.clf_dims));
        }
        if self.clf_dims.contains(&0) || self.d_repr == 0 || self.probe_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.n_blocks == 0 || self.window_len == 0 || self.in_channels == 0 {
            return fail("n_blocks, window_len and in_channels must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
