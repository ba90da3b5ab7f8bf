//! Snippet-partitioned plain-ViT backbone.
//!
//! A clip of `T` frames is cut into `Ns` snippets of `Ls = T/Ns` frames. Each
//! snippet is tokenized into a `Ls'×h'×w'` grid of tubelet tokens, and every
//! backbone block attends only within one snippet. Propagation blocks run on
//! the concatenated clip-level grid `[T', h', w', C]` after the block indices
//! returned by [`place_blocks`].

use rand::Rng;
use vit_tad_tensor::{BoundParams, Graph, InitScheme, ParamId, ParamStore, Tensor, Var};

use crate::config::{ModelConfig, Placement};
use crate::error::{Error, Result};
use crate::layers::{trunc_normal, EncoderLayer, Linear};
use crate::propagation::PropagationBlock;
use crate::rng::named_rng;
use crate::video::{VideoClip, CHANNELS};

/// Backbone output: clip-level token grid plus its time axis.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[T', H', W', C]`.
    pub tokens: Tensor,
    /// Frames per temporal token.
    pub temporal_stride: usize,
    pub clip_origin_s: f64,
}

/// Splits a clip into `ns` consecutive, non-overlapping snippets.
pub fn partition_snippets(clip: &VideoClip, ns: usize) -> Result<Vec<VideoClip>> {
    if ns == 0 || clip.frames % ns != 0 {
        return Err(Error::Config(format!(
            "T={} frames cannot be split into Ns={ns} equal snippets",
            clip.frames
        )));
    }
    let ls = clip.frames / ns;
    Ok((0..ns).map(|j| clip.sub_clip(j * ls, (j + 1) * ls)).collect())
}

/// Flattens every non-overlapping `kt×kh×kw×3` voxel block into one row.
///
/// Rows are ordered `(t', y', x')` and each row is ordered `(dt, dy, dx, channel)`,
/// giving `[T'·h'·w', kt·kh·kw·3]`.
pub fn gather_tubelets(clip: &VideoClip, tubelet: [usize; 3]) -> Result<Tensor> {
    let [kt, kh, kw] = tubelet;
    if tubelet.contains(&0) || clip.frames % kt != 0 || clip.height % kh != 0 || clip.width % kw != 0 {
        return Err(Error::Config(format!(
            "tubelet {tubelet:?} does not tile a {}x{}x{} clip",
            clip.frames, clip.height, clip.width
        )));
    }
    let (tt, th, tw) = (clip.frames / kt, clip.height / kh, clip.width / kw);
    let row = kt * kh * kw * CHANNELS;
    let mut data = Vec::with_capacity(tt * th * tw * row);
    for t in 0..tt {
        for y in 0..th {
            for x in 0..tw {
                for dt in 0..kt {
                    let frame = clip.frame(t * kt + dt);
                    for dy in 0..kh {
                        let start = ((y * kh + dy) * clip.width + x * kw) * CHANNELS;
                        data.extend(frame[start..start + kw * CHANNELS].iter().map(|&p| p as f64));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[tt * th * tw, row], data)?)
}

/// Linear projection of each tubelet: `[T, H, W, 3]` pixels to `[T', h', w', C]` tokens.
pub fn tubelet_embed<'g>(
    graph: &'g Graph,
    clip: &VideoClip,
    tubelet: [usize; 3],
    proj: &Linear,
    p: &BoundParams<'g>,
) -> Result<Var<'g>> {
    let patches = graph.constant(gather_tubelets(clip, tubelet)?);
    let tokens = proj.forward(patches, p)?;
    let c = tokens.shape()[1];
    let [kt, kh, kw] = tubelet;
    Ok(tokens.reshape(&[clip.frames / kt, clip.height / kh, clip.width / kw, c])?)
}

/// Learnable positional encodings.
#[derive(Debug, Clone)]
pub struct PositionalEncodings {
    /// `[Ls', h', w', C]`, shared by every snippet.
    pub snippet_pe: ParamId,
    /// `[T', C]`, one row per clip-level temporal position; zero at init.
    pub clip_pe: ParamId,
}

impl PositionalEncodings {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let g = cfg.geometry();
        Ok(Self {
            snippet_pe: store.add(
                "backbone.snippet_pe",
                &[g.snippet_tokens, g.tokens_h, g.tokens_w, g.embed_dim],
                trunc_normal(),
                rng,
            )?,
            clip_pe: store.add("backbone.clip_pe", &[g.tokens_t, g.embed_dim], InitScheme::Zeros, rng)?,
        })
    }
}

/// `tokens + snippet_pe + clip_pe[j·Ls'..(j+1)·Ls']` broadcast over `h'×w'`,
/// for the tokens `[Ls', h', w', C]` of snippet `j`.
pub fn add_positional<'g>(
    tokens: Var<'g>,
    snippet_pe: Var<'g>,
    clip_pe: Var<'g>,
    j: usize,
) -> Result<Var<'g>> {
    let ls = tokens.shape()[0];
    let rows = clip_pe.shape()[0];
    if (j + 1) * ls > rows {
        return Err(Error::Config(format!(
            "snippet {j} of {ls} tokens exceeds clip_pe with {rows} rows"
        )));
    }
    let slice = select_rows(clip_pe, j * ls, (j + 1) * ls)?;
    Ok(tokens.add(snippet_pe)?.add_mid_broadcast(slice)?)
}

/// Clip-level form of [`add_positional`] on `[T', h', w', C]`; identical to
/// applying it snippet by snippet.
pub fn add_positional_clip<'g>(tokens: Var<'g>, snippet_pe: Var<'g>, clip_pe: Var<'g>) -> Result<Var<'g>> {
    let s = tokens.shape();
    let ls = snippet_pe.shape()[0];
    let per_snippet = tokens.reshape(&[s[0] / ls, ls, s[1], s[2], s[3]])?;
    Ok(per_snippet.add_tiled(snippet_pe)?.reshape(&s)?.add_mid_broadcast(clip_pe)?)
}

/// Rows `[start, end)` of a `[N, C]` variable as a differentiable selection.
fn select_rows<'g>(x: Var<'g>, start: usize, end: usize) -> Result<Var<'g>> {
    let n = x.shape()[0];
    let sel = Tensor::from_fn(&[end - start, n], |i| {
        let (r, c) = (i / n, i % n);
        if c == start + r {
            1.0
        } else {
            0.0
        }
    })?;
    Ok(x.graph().constant(sel).matmul(x)?)
}

/// Bicubically resizes the spatial axes of a snippet PE `[Ls', h, w, C]`,
/// e.g. to run weights trained at one resolution on another.
pub fn resize_snippet_pe(pe: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = pe.shape();
    if s.len() != 4 {
        return Err(Error::Config(format!("snippet PE must be rank 4, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let slices = (0..s[0])
        .map(|t| {
            let slice = Tensor::new(&s[1..], pe.data()[t * per..(t + 1) * per].to_vec())?;
            let r = vit_tad_tensor::bicubic_resize_2d(&slice, out_h, out_w)?;
            Ok(r.reshape(&[1, out_h, out_w, s[3]])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat0(&slices)?)
}

/// Block indices (0-based) after which a propagation block runs.
pub fn place_blocks(n_blocks: usize, k_prop: usize, placement: Placement) -> Result<Vec<usize>> {
    if k_prop > n_blocks {
        return Err(Error::Config(format!("k_prop={k_prop} exceeds n_blocks={n_blocks}")));
    }
    if k_prop == 0 {
        return Ok(Vec::new());
    }
    Ok(match placement {
        Placement::Evenly => {
            if n_blocks % k_prop != 0 {
                return Err(Error::Config(format!(
                    "evenly placement needs n_blocks={n_blocks} divisible by k_prop={k_prop}"
                )));
            }
            let step = n_blocks / k_prop;
            (1..=k_prop).map(|i| i * step - 1).collect()
        }
        Placement::First => (0..k_prop).collect(),
        Placement::Last => (n_blocks - k_prop..n_blocks).collect(),
    })
}

/// Pre-norm transformer block applied to every snippet independently.
/// `x: [Ns, Ls'·h'·w', C]`.
pub fn intra_snippet_block<'g>(x: Var<'g>, block: &EncoderLayer, p: &BoundParams<'g>) -> Result<Var<'g>> {
    Ok(block.forward(x, p)?)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub pe: PositionalEncodings,
    pub blocks: Vec<EncoderLayer>,
    /// `(block index, propagation block)` sorted by index.
    pub props: Vec<(usize, PropagationBlock)>,
}

impl Backbone {
    /// Every sub-module draws from its own seed-and-name stream, so adding or
    /// removing propagation blocks leaves all other initial weights unchanged.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let [kt, kh, kw] = cfg.tubelet;
        let c = cfg.embed_dim;
        let embed = Linear::new(
            store,
            &mut named_rng(seed, "backbone.embed"),
            "backbone.embed",
            (kt * kh * kw * CHANNELS, c),
            true,
            trunc_normal(),
        )?;
        let pe = PositionalEncodings::new(store, &mut named_rng(seed, "backbone.pe"), cfg)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("backbone.block{i}");
                EncoderLayer::new(store, &mut named_rng(seed, &name), &name, c, cfg.heads)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut props = Vec::new();
        for i in place_blocks(cfg.depth, cfg.active_prop_blocks(), cfg.placement)? {
            let name = format!("backbone.prop{i}");
            if let Some(b) = PropagationBlock::new(cfg.prop_kind, store, &mut named_rng(seed, &name), &name, c, cfg.heads)? {
                props.push((i, b));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pe,
            blocks,
            props,
        })
    }

    /// Clip pixels to the token grid `[T', h', w', C]`.
    pub fn forward<'g>(&self, graph: &'g Graph, clip: &VideoClip, p: &BoundParams<'g>) -> Result<Var<'g>> {
        let cfg = &self.cfg;
        if (clip.frames, clip.height, clip.width) != (cfg.frames, cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "clip is {}x{}x{}, model expects {}x{}x{}",
                clip.frames, clip.height, clip.width, cfg.frames, cfg.height, cfg.width
            )));
        }
        let g = cfg.geometry();
        let grid = [g.tokens_t, g.tokens_h, g.tokens_w, g.embed_dim];
        let snippets = [cfg.snippets, g.snippet_tokens * g.spatial(), g.embed_dim];
        let x = tubelet_embed(graph, clip, cfg.tubelet, &self.embed, p)?;
        let mut x = add_positional_clip(x, p.var(self.pe.snippet_pe), p.var(self.pe.clip_pe))?;
        let mut props = self.props.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            x = intra_snippet_block(x.reshape(&snippets)?, block, p)?;
            while let Some((_, prop)) = props.next_if(|(at, _)| *at == i) {
                x = prop.forward(x.reshape(&grid)?, p)?;
            }
        }
        Ok(x.reshape(&grid)?)
    }

    /// Forward without gradient tracking.
    pub fn feature_map(&self, store: &ParamStore, clip: &VideoClip, clip_origin_s: f64) -> Result<FeatureMap> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let tokens = (*self.forward(&g, clip, &p)?.value()).clone();
        Ok(FeatureMap {
            tokens,
            temporal_stride: self.cfg.temporal_stride(),
            clip_origin_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_rules() {
        assert_eq!(place_blocks(12, 4, Placement::Evenly).unwrap(), vec![2, 5, 8, 11]);
        assert_eq!(place_blocks(12, 4, Placement::First).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(place_blocks(12, 4, Placement::Last).unwrap(), vec![8, 9, 10, 11]);
        for pl in [Placement::Evenly, Placement::First, Placement::Last] {
            assert_eq!(place_blocks(12, 12, pl).unwrap(), (0..12).collect::<Vec<_>>());
        }
        assert!(place_blocks(12, 5, Placement::Evenly).is_err());
        assert!(place_blocks(4, 5, Placement::First).is_err());
    }

    #[test]
    fn partition_counts() {
        let clip = VideoClip::zeros(256, 2, 2, 30.0);
        let parts = partition_snippets(&clip, 16).unwrap();
        assert_eq!(parts.len(), 16);
        assert!(parts.iter().all(|p| p.frames == 16));
        let clip = VideoClip::zeros(384, 1, 1, 30.0);
        assert_eq!(partition_snippets(&clip, 24).unwrap()[0].frames, 16);
        let err = partition_snippets(&VideoClip::zeros(30, 1, 1, 8.0), 4).unwrap_err().to_string();
        assert!(err.contains("T=30") && err.contains("Ns=4"), "{err}");
    }
}
