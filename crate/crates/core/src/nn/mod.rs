//! Parameterized layers. A layer knows its parameter names and shapes;
//! parameter values live in a [`ParamStore`] and are placed on a tape with
//! [`ParamStore::bind`] before a forward pass.

mod layers;
mod params;

pub use layers::{Conv3d, FeedForward, LayerNorm, LayerSpec, Linear, MultiHeadAttention, Norm, NORM_EPS};
pub use params::{join, Bound, ParamStore};
