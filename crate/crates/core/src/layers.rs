//! Shared transformer building blocks.

use rand::Rng;
use vit_tad_tensor::{BoundParams, InitScheme, ParamId, ParamStore, Result, Var};

pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

pub(crate) fn trunc_normal() -> InitScheme {
    InitScheme::TruncatedNormal { std: WEIGHT_STD }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: (usize, usize),
        bias: bool,
        w_init: InitScheme,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[dims.0, dims.1], w_init, rng)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), &[dims.1], InitScheme::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        x.linear(p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), &[dim], InitScheme::IdentityScaled(1.0), rng)?,
            beta: store.add(&format!("{name}.beta"), &[dim], InitScheme::Zeros, rng)?,
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head self-attention: bias-free `w_q`, `w_k`, `w_v` and an output
/// projection with bias. Produces the residual branch only.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        out_init: InitScheme,
    ) -> Result<Self> {
        let mut proj = |n: &str| store.add(&format!("{name}.{n}"), &[dim, dim], trunc_normal(), rng);
        let (w_q, w_k, w_v) = (proj("w_q")?, proj("w_k")?, proj("w_v")?);
        let out = Linear::new(store, rng, &format!("{name}.out"), (dim, dim), true, out_init)?;
        Ok(Self { w_q, w_k, w_v, out, heads })
    }

    /// Attention within each row of `x: [batch, len, C]`.
    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let y = self.attend(x, p)?;
        self.out.forward(y, p)
    }

    /// Concatenated head outputs before the output projection.
    pub fn attend<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let q = x.linear(p.var(self.w_q), None)?;
        let k = x.linear(p.var(self.w_k), None)?;
        let v = x.linear(p.var(self.w_v), None)?;
        q.attention(k, v, self.heads)
    }
}

/// Pre-norm transformer encoder layer: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Self::with_final_init(store, rng, name, dim, heads, trunc_normal())
    }

    /// `final_init` initializes both residual-branch output projections.
    pub fn with_final_init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        final_init: InitScheme,
    ) -> Result<Self> {
        let hidden = dim * MLP_RATIO;
        Ok(Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim)?,
            attn: Mhsa::new(store, rng, &format!("{name}.attn"), dim, heads, final_init)?,
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), (dim, hidden), true, trunc_normal())?,
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), (hidden, dim), true, final_init)?,
        })
    }

    /// `x: [batch, len, C]`; sequences in different batch rows never interact.
    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let h = self.attn.forward(self.ln1.forward(x, p)?, p)?;
        let x = x.add(h)?;
        let h = self.fc1.forward(self.ln2.forward(x, p)?, p)?.gelu()?;
        let h = self.fc2.forward(h, p)?;
        x.add(h)
    }
}
