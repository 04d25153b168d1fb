//! The segmentation network: CNN encoder with skips, token embedding,
//! pre-norm transformer, feature mapping back to the grid, a
//! skip-connected decoder with sigmoid head, and a VAE branch that
//! reconstructs the input from a 128-dimensional latent.

mod config;
mod net;

use std::time::Instant;

pub use config::{parse_kv, parse_patch, ModelConfig, VaeSource};
pub use net::{
    build_model, grid_to_tokens, tokens_to_grid, DecoderLevel, EncoderLevel, EncoderOut, ForwardOutput, ForwardVars, ResBlock,
    SegTransVae, TransformerLayer, Vae, VaeStage, LOGVAR_CLAMP, PE_NAME,
};

use crate::error::{Error, Result};
use crate::tensor::{Init, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub parameter_count: usize,
    /// Multiply-accumulate counted as two FLOPs.
    pub flops_forward: u64,
    /// Mean wall time of one inference forward pass, in seconds.
    pub inference_seconds: f64,
}

/// Builds the model for `config` and times `repetitions` inference passes
/// on a random batch of one.
pub fn complexity_report(config: &ModelConfig, repetitions: usize) -> Result<ComplexityReport> {
    if repetitions == 0 {
        return Err(Error::Contract("repetitions must be at least 1".into()));
    }
    let (store, net) = build_model::<f32>(config)?;
    let [h, w, d] = config.patch_size;
    let mut rng = Rng::derive(config.seed, 1);
    let x = Tensor::build(Init::Normal { mean: 0.0, std: 1.0 }, [1, config.in_channels, h, w, d], Some(&mut rng))?;
    let start = Instant::now();
    for _ in 0..repetitions {
        net.infer(&store, &x, None, false)?;
    }
    Ok(ComplexityReport {
        parameter_count: store.parameter_count(),
        flops_forward: net.flops_forward(),
        inference_seconds: start.elapsed().as_secs_f64() / repetitions as f64,
    })
}
