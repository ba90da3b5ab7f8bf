//! Spatial squeeze followed by a stack of temporal encoder layers.

use rand::Rng;
use vit_tad_tensor::{BoundParams, InitScheme, ParamStore, Result, Tensor, Var};

use crate::layers::EncoderLayer;

/// Clip-level temporal features.
#[derive(Debug, Clone)]
pub struct TemporalSequence {
    /// `[T', C]`.
    pub feats: Tensor,
    pub temporal_stride: usize,
    pub clip_origin_s: f64,
}

/// Mean over the spatial axes: `[T', h', w', C]` to `[T', C]`.
pub fn spatial_pool<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_axis(1)
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TemporalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Self::with_final_init(store, rng, prefix, n_layers, dim, heads, crate::layers::trunc_normal())
    }

    /// Layers whose residual-branch output projections use `final_init`;
    /// `InitScheme::Zeros` yields an exact identity stack.
    pub fn with_final_init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        final_init: InitScheme,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::with_final_init(store, rng, &format!("{prefix}.layer{i}"), dim, heads, final_init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `x: [T', C]`; zero layers is the identity.
    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let mut h = x.reshape(&[1, s[0], s[1]])?;
        for layer in &self.layers {
            h = layer.forward(h, p)?;
        }
        h.reshape(&s)
    }
}
