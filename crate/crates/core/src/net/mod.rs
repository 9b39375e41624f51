//! The differentiable model: feature encoder, label encoder, non-causal
//! transformer encoder and classification head, with explicit
//! reverse-mode gradients, Adam and a warmup-cosine schedule.
//!
//! The transformer uses full bidirectional self-attention over the
//! NK+1 tokens of each sequence and no positional encodings, so context
//! permutation invariance holds exactly (up to float rounding).
//! Everything is generic over the scalar type; training runs in f32,
//! the finite-difference oracle instantiates the same code at f64.

mod adam;
mod checkpoint;
mod model;
mod params;

pub use adam::{adam_step, lr_at, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{episode_loss, forward_logits, grad_params, loss_and_grad};
pub use params::{init_params, FeatMode, LayerParams, MlpEncoderParams, ModelConfig, ModelParams};

/// f64 constant to scalar type conversion.
pub(crate) fn c<F: ndarray::NdFloat>(x: f64) -> F {
    F::from(x).expect("constant conversion")
}
