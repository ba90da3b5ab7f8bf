//! Model hyperparameters and their validation rules.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};

/// Which cross-snippet propagation block runs inside the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropKind {
    None,
    Local,
    Global1d,
    Global3d,
}

/// Where the propagation blocks sit among the backbone blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Evenly,
    First,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip.
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Number of non-overlapping snippets per clip.
    #[serde(rename = "Ns")]
    pub snippets: usize,
    /// Backbone depth.
    #[serde(rename = "n_blocks")]
    pub depth: usize,
    #[serde(rename = "C")]
    pub embed_dim: usize,
    #[serde(rename = "m")]
    pub heads: usize,
    /// Tubelet size `(kt, kh, kw)`.
    pub tubelet: [usize; 3],
    pub k_prop: usize,
    pub prop_kind: PropKind,
    pub placement: Placement,
    #[serde(rename = "L_post")]
    pub post_layers: usize,
    pub pyramid_levels: usize,
    pub num_classes: usize,
    pub fps: f64,
}

impl Default for ModelConfig {
    /// The desk-scale configuration: 32 frames of 32×32 in 4 snippets.
    fn default() -> Self {
        Self {
            frames: 32,
            height: 32,
            width: 32,
            snippets: 4,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            tubelet: [2, 4, 4],
            k_prop: 1,
            prop_kind: PropKind::Global1d,
            placement: Placement::Evenly,
            post_layers: 3,
            pyramid_levels: 3,
            num_classes: 2,
            fps: 8.0,
        }
    }
}

/// Derived token-grid sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    /// Frames per snippet.
    pub snippet_frames: usize,
    /// Temporal tokens per snippet.
    pub snippet_tokens: usize,
    /// Temporal tokens per clip.
    pub tokens_t: usize,
    pub tokens_h: usize,
    pub tokens_w: usize,
    pub embed_dim: usize,
}

impl Geometry {
    pub fn spatial(&self) -> usize {
        self.tokens_h * self.tokens_w
    }

    pub fn tokens(&self) -> usize {
        self.tokens_t * self.spatial()
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let [kt, kh, kw] = self.tubelet;
        if [self.frames, self.height, self.width, self.snippets, self.depth, self.embed_dim, self.heads]
            .contains(&0)
            || self.tubelet.contains(&0)
        {
            return err("all dimensions must be positive".into());
        }
        if self.frames % self.snippets != 0 {
            return err(format!("T={} is not divisible by Ns={}", self.frames, self.snippets));
        }
        let ls = self.frames / self.snippets;
        if ls % kt != 0 || self.height % kh != 0 || self.width % kw != 0 {
            return err(format!(
                "tubelet {:?} does not tile a snippet of {ls}x{}x{}",
                self.tubelet, self.height, self.width
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return err(format!("C={} is not divisible by m={}", self.embed_dim, self.heads));
        }
        if self.prop_kind != PropKind::None {
            if self.k_prop == 0 || self.k_prop > self.depth {
                return err(format!("k_prop={} must be in 1..={}", self.k_prop, self.depth));
            }
            if self.placement == Placement::Evenly && self.depth % self.k_prop != 0 {
                return err(format!(
                    "evenly placement needs n_blocks={} divisible by k_prop={}",
                    self.depth, self.k_prop
                ));
            }
            if self.prop_kind == PropKind::Local && self.embed_dim % crate::propagation::BOTTLENECK_RATIO != 0 {
                return err(format!(
                    "local block needs C={} divisible by {}",
                    self.embed_dim,
                    crate::propagation::BOTTLENECK_RATIO
                ));
            }
        }
        if self.pyramid_levels == 0 {
            return err("pyramid_levels must be at least 1".into());
        }
        let tokens_t = self.frames / kt;
        if tokens_t < 1 << (self.pyramid_levels - 1) {
            return err(format!(
                "T'={tokens_t} temporal tokens cannot support {} pyramid levels",
                self.pyramid_levels
            ));
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        let [kt, kh, kw] = self.tubelet;
        let snippet_frames = self.frames / self.snippets;
        Geometry {
            snippet_frames,
            snippet_tokens: snippet_frames / kt,
            tokens_t: self.frames / kt,
            tokens_h: self.height / kh,
            tokens_w: self.width / kw,
            embed_dim: self.embed_dim,
        }
    }

    /// Number of propagation blocks actually inserted.
    pub fn active_prop_blocks(&self) -> usize {
        if self.prop_kind == PropKind::None {
            0
        } else {
            self.k_prop
        }
    }

    /// Frames advanced per temporal token.
    pub fn temporal_stride(&self) -> usize {
        self.tubelet[0]
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(json_err(path))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
