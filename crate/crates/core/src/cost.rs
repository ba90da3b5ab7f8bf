//! Analytic multiply-accumulate, attention-memory and parameter counts.
//!
//! One multiply-accumulate counts as 1. Softmax, normalization and
//! elementwise work are not counted. Convolutions count every kernel tap at
//! every output position, padded taps included, which is what the
//! instrumented kernels execute.

use std::fmt::Write as _;
use std::ops::Add;

use crate::config::{ModelConfig, PropKind};
use crate::head::{pyramid_geometry, TOWER_DEPTH};
use crate::layers::MLP_RATIO;
use crate::propagation::BOTTLENECK_RATIO;
use crate::video::CHANNELS;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostEstimate {
    /// Query-key scores plus attention-weighted values.
    pub attn_mult_adds: u64,
    /// Linear projections and convolutions.
    pub proj_mult_adds: u64,
    /// Largest attention matrix held at once, summed over heads and batch.
    pub attn_matrix_elems: u64,
    pub params: u64,
}

impl CostEstimate {
    pub fn mult_adds(&self) -> u64 {
        self.attn_mult_adds + self.proj_mult_adds
    }

    /// `n` copies run one after another: work and parameters add, peak memory does not.
    pub fn repeat(&self, n: u64) -> Self {
        Self {
            attn_mult_adds: self.attn_mult_adds * n,
            proj_mult_adds: self.proj_mult_adds * n,
            attn_matrix_elems: if n == 0 { 0 } else { self.attn_matrix_elems },
            params: self.params * n,
        }
    }
}

impl Add for CostEstimate {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            attn_mult_adds: self.attn_mult_adds + o.attn_mult_adds,
            proj_mult_adds: self.proj_mult_adds + o.proj_mult_adds,
            attn_matrix_elems: self.attn_matrix_elems.max(o.attn_matrix_elems),
            params: self.params + o.params,
        }
    }
}

/// Multi-head attention over `batch` sequences of `len` tokens, with bias-free
/// q/k/v projections and a biased output projection.
pub fn mhsa_cost(batch: u64, len: u64, c: u64, m: u64) -> CostEstimate {
    CostEstimate {
        attn_mult_adds: 2 * batch * len * len * c,
        proj_mult_adds: 4 * batch * len * c * c,
        attn_matrix_elems: batch * m * len * len,
        params: 4 * c * c + c,
    }
}

/// Temporal attention at each of the `H'·W'` locations over `T'` steps.
pub fn attn_cost_1d(h: u64, w: u64, t: u64, c: u64, m: u64) -> CostEstimate {
    mhsa_cost(h * w, t, c, m)
}

/// Joint attention over all `H'·W'·T'` tokens.
pub fn attn_cost_3d(h: u64, w: u64, t: u64, c: u64, m: u64) -> CostEstimate {
    mhsa_cost(1, h * w * t, c, m)
}

/// Pre-norm encoder layer (attention plus MLP) on `batch × len` tokens.
pub fn encoder_layer_cost(batch: u64, len: u64, c: u64, m: u64) -> CostEstimate {
    let hidden = MLP_RATIO as u64 * c;
    let attn = mhsa_cost(batch, len, c, m);
    CostEstimate {
        proj_mult_adds: attn.proj_mult_adds + 2 * batch * len * c * hidden,
        params: attn.params + 4 * c + (c * hidden + hidden) + (hidden * c + c),
        ..attn
    }
}

/// Convolution with `taps` kernel taps producing `positions` outputs.
pub fn conv_cost(positions: u64, taps: u64, cin: u64, cout: u64) -> CostEstimate {
    CostEstimate {
        proj_mult_adds: positions * taps * cin * cout,
        params: taps * cin * cout + cout,
        ..Default::default()
    }
}

/// Bottleneck 3D-conv block on a `T'×H'×W'` grid.
pub fn local_block_cost(h: u64, w: u64, t: u64, c: u64) -> CostEstimate {
    let n = h * w * t;
    let mid = c / BOTTLENECK_RATIO as u64;
    let convs = conv_cost(n, 1, c, mid) + conv_cost(n, 27, mid, mid) + conv_cost(n, 1, mid, c);
    CostEstimate {
        params: convs.params + 2 * c,
        ..convs
    }
}

/// Cost of one propagation block of `kind`.
pub fn prop_block_cost(kind: PropKind, h: u64, w: u64, t: u64, c: u64, m: u64) -> CostEstimate {
    match kind {
        PropKind::None => CostEstimate::default(),
        PropKind::Local => local_block_cost(h, w, t, c),
        PropKind::Global1d => attn_cost_1d(h, w, t, c, m),
        PropKind::Global3d => attn_cost_3d(h, w, t, c, m),
    }
}

/// Per-stage costs of one clip forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineCost {
    pub backbone: CostEstimate,
    pub propagation: CostEstimate,
    pub post_backbone: CostEstimate,
    pub head: CostEstimate,
}

impl PipelineCost {
    pub fn total(&self) -> CostEstimate {
        self.backbone + self.propagation + self.post_backbone + self.head
    }

    pub fn stages(&self) -> [(&'static str, CostEstimate); 4] {
        [
            ("backbone", self.backbone),
            ("propagation", self.propagation),
            ("post_backbone", self.post_backbone),
            ("head", self.head),
        ]
    }

    /// `stage,mult_adds,attn_mult_adds,proj_mult_adds,attn_matrix_elems,params` plus a total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,mult_adds,attn_mult_adds,proj_mult_adds,attn_matrix_elems,params\n");
        for (name, c) in self.stages().into_iter().chain([("total", self.total())]) {
            writeln!(
                out,
                "{name},{},{},{},{},{}",
                c.mult_adds(),
                c.attn_mult_adds,
                c.proj_mult_adds,
                c.attn_matrix_elems,
                c.params
            )
            .unwrap();
        }
        out
    }
}

/// Sums the per-op costs of the whole model for `cfg`.
pub fn pipeline_cost(cfg: &ModelConfig) -> PipelineCost {
    let g = cfg.geometry();
    let [kt, kh, kw] = cfg.tubelet.map(|v| v as u64);
    let (t, h, w) = (g.tokens_t as u64, g.tokens_h as u64, g.tokens_w as u64);
    let (c, m, k) = (cfg.embed_dim as u64, cfg.heads as u64, cfg.num_classes as u64);
    let tokens = t * h * w;
    let patch = kt * kh * kw * CHANNELS as u64;

    let embed = CostEstimate {
        proj_mult_adds: tokens * patch * c,
        params: patch * c + c + (g.snippet_tokens as u64 * h * w * c) + t * c,
        ..Default::default()
    };
    let snippet_len = g.snippet_tokens as u64 * h * w;
    let backbone = embed + encoder_layer_cost(cfg.snippets as u64, snippet_len, c, m).repeat(cfg.depth as u64);

    let propagation = prop_block_cost(cfg.prop_kind, h, w, t, c, m).repeat(cfg.active_prop_blocks() as u64);

    let post_backbone = encoder_layer_cost(1, t, c, m).repeat(cfg.post_layers as u64);

    let levels = pyramid_geometry(g.tokens_t, cfg.temporal_stride(), cfg.pyramid_levels).unwrap_or_default();
    let mut head = CostEstimate {
        proj_mult_adds: t * c * c,
        params: c * c + c,
        ..Default::default()
    };
    let tower = TOWER_DEPTH as u64;
    for (l, lg) in levels.iter().enumerate() {
        let n = lg.len as u64;
        if l > 0 {
            head = head + conv_cost(n, 3, c, c);
        }
        let work = conv_cost(n, 3, c, c).repeat(2 * tower) + conv_cost(n, 3, c, k) + conv_cost(n, 3, c, 2);
        head.proj_mult_adds += work.proj_mult_adds;
    }
    head.params += 2 * tower * (3 * c * c + c) + (3 * c * k + k) + (3 * c * 2 + 2);

    PipelineCost {
        backbone,
        propagation,
        post_backbone,
        head,
    }
}
