//! Cross-snippet propagation blocks inserted between backbone blocks.
//!
//! All three variants operate on the clip-level token grid `[T', H', W', C]`
//! and are residual: `y = x + branch(x)`. The last layer of every branch is
//! zero-initialized, so a freshly built block is an exact identity map.
//!
//! * [`LocalBlock`]: bottleneck of three 3D convolutions. The middle
//!   `3×3×3` kernel reaches one token across snippet boundaries per block.
//! * Global 1D: temporal self-attention over all `T'` positions, run
//!   independently at every spatial location (spatial axes folded into the
//!   batch axis).
//! * Global 3D: one joint attention over all `T'·H'·W'` tokens; the costly
//!   reference the 1D factorization replaces.

use rand::Rng;
use vit_tad_tensor::{same_padding, BoundParams, InitScheme, ParamId, ParamStore, Result, Tensor, Var};

use crate::config::PropKind;
use crate::layers::Mhsa;

/// Channel reduction inside the local bottleneck.
pub const BOTTLENECK_RATIO: usize = 4;

pub(crate) fn conv_init(fan_in: usize) -> InitScheme {
    InitScheme::TruncatedNormal {
        std: (2.0 / fan_in as f64).sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct LocalBlock {
    pub reduce: (ParamId, ParamId),
    pub spatial: (ParamId, ParamId),
    pub expand: (ParamId, ParamId),
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
}

impl LocalBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        let mid = dim / BOTTLENECK_RATIO;
        let mut conv = |n: &str, k: usize, cin: usize, cout: usize| -> Result<(ParamId, ParamId)> {
            let w = store.add(&format!("{name}.{n}.w"), &[k, k, k, cin, cout], conv_init(k * k * k * cin), rng)?;
            let b = store.add(&format!("{name}.{n}.b"), &[cout], InitScheme::Zeros, rng)?;
            Ok((w, b))
        };
        let reduce = conv("conv_reduce", 1, dim, mid)?;
        let spatial = conv("conv_spatial", 3, mid, mid)?;
        let expand = conv("conv_expand", 1, mid, dim)?;
        Ok(Self {
            reduce,
            spatial,
            expand,
            norm_scale: store.add(&format!("{name}.final_norm.scale"), &[dim], InitScheme::Zeros, rng)?,
            norm_shift: store.add(&format!("{name}.final_norm.shift"), &[dim], InitScheme::Zeros, rng)?,
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let conv = |x: Var<'g>, (w, b): (ParamId, ParamId), k: usize| -> Result<Var<'g>> {
            x.conv3d(p.var(w), Some(p.var(b)), [1; 3], same_padding([k; 3])?)
        };
        let h = conv(x, self.reduce, 1)?.gelu()?;
        let h = conv(h, self.spatial, 3)?.gelu()?;
        let h = conv(h, self.expand, 1)?;
        let h = h.channel_affine(p.var(self.norm_scale), p.var(self.norm_shift))?;
        x.add(h)
    }
}

/// Attention weights of a global block; `out` starts at zero.
#[derive(Debug, Clone)]
pub struct GlobalBlock {
    pub attn: Mhsa,
}

impl GlobalBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Mhsa::new(store, rng, name, dim, heads, InitScheme::Zeros)?,
        })
    }

    /// Temporal attention per spatial location on `x: [T', H', W', C]`.
    pub fn forward_1d<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (t, hw, c) = (s[0], s[1] * s[2], s[3]);
        let seqs = x.reshape(&[t, hw, c])?.permute(&[1, 0, 2])?;
        let y = self.attn.forward(seqs, p)?;
        let y = y.permute(&[1, 0, 2])?.reshape(&s)?;
        x.add(y)
    }

    /// Joint attention over every token of `x: [T', H', W', C]`.
    pub fn forward_3d<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let n = s[0] * s[1] * s[2];
        let y = self.attn.forward(x.reshape(&[1, n, s[3]])?, p)?;
        x.add(y.reshape(&s)?)
    }
}

#[derive(Debug, Clone)]
pub enum PropagationBlock {
    Local(LocalBlock),
    Global1d(GlobalBlock),
    Global3d(GlobalBlock),
}

impl PropagationBlock {
    /// `None` for [`PropKind::None`].
    pub fn new(
        kind: PropKind,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Option<Self>> {
        Ok(match kind {
            PropKind::None => None,
            PropKind::Local => Some(Self::Local(LocalBlock::new(store, rng, name, dim)?)),
            PropKind::Global1d => Some(Self::Global1d(GlobalBlock::new(store, rng, name, dim, heads)?)),
            PropKind::Global3d => Some(Self::Global3d(GlobalBlock::new(store, rng, name, dim, heads)?)),
        })
    }

    pub fn forward<'g>(&self, x: Var<'g>, p: &BoundParams<'g>) -> Result<Var<'g>> {
        match self {
            Self::Local(b) => b.forward(x, p),
            Self::Global1d(b) => b.forward_1d(x, p),
            Self::Global3d(b) => b.forward_3d(x, p),
        }
    }
}

/// Plain-loop multi-head attention over one sequence `[len, C]`, including
/// the output projection and residual: `x + (softmax(qkᵀ/√d)v)·w_o + b_o`.
/// Used as an independent reference for the graph implementation.
pub fn reference_sequence_attention(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    w_o: &Tensor,
    b_o: &Tensor,
    heads: usize,
) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / heads;
    let proj = |w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = (0..c).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(w_q), proj(w_k), proj(w_v));
    let mut y = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..d {
                y[i * c + h * d + e] = (0..n).map(|j| exps[j] / z * v[j * c + h * d + e]).sum();
            }
        }
    }
    let mut out = x.data().to_vec();
    for i in 0..n {
        for j in 0..c {
            out[i * c + j] += b_o.data()[j] + (0..c).map(|k| y[i * c + k] * w_o.at(&[k, j])).sum::<f64>();
        }
    }
    Tensor::new(&[n, c], out).expect("finite reference output")
}

/// Runs [`reference_sequence_attention`] separately on the `T'`-long column
/// at every spatial location of `x: [T', H', W', C]`.
pub fn reference_global_1d(x: &Tensor, block: &GlobalBlock, store: &ParamStore) -> Tensor {
    let s = x.shape();
    let (t, hw, c) = (s[0], s[1] * s[2], s[3]);
    let a = &block.attn;
    let bias = store.tensor(a.out.b.expect("global block out bias"));
    let mut out = vec![0.0; x.numel()];
    for loc in 0..hw {
        let col: Vec<f64> = (0..t).flat_map(|ti| x.data()[(ti * hw + loc) * c..][..c].to_vec()).collect();
        let col = Tensor::new(&[t, c], col).expect("finite column");
        let y = reference_sequence_attention(
            &col,
            store.tensor(a.w_q),
            store.tensor(a.w_k),
            store.tensor(a.w_v),
            store.tensor(a.out.w),
            bias,
            a.heads,
        );
        for ti in 0..t {
            out[(ti * hw + loc) * c..][..c].copy_from_slice(&y.data()[ti * c..][..c]);
        }
    }
    Tensor::new(s, out).expect("finite reference output")
}

/// Max absolute deviation between the batch-folded 1D block and the
/// per-location reference.
pub fn attention_equivalence_probe(x: &Tensor, block: &GlobalBlock, store: &ParamStore) -> Result<f64> {
    let g = vit_tad_tensor::Graph::new();
    let p = store.bind_frozen(&g);
    let y = block.forward_1d(g.constant(x.clone()), &p)?.value();
    Ok(y.max_abs_diff(&reference_global_1d(x, block, store)))
}
