//! Snippet-based plain-ViT temporal action detector.
//!
//! A clip is split into non-overlapping snippets that a ViT backbone encodes
//! independently, except at a few propagation blocks where features of all
//! snippets interact (a local 3D-conv bottleneck or global temporal
//! attention). The clip-level features are pooled over space, refined by a
//! temporal transformer encoder and fed to an anchor-free detection head.
//!
//! Besides the model, the crate holds the evaluation protocol (tIoU, AP,
//! mAP, error breakdown), an analytic cost model and a synthetic dataset
//! generator.

pub mod backbone;
pub mod config;
pub mod cost;
pub mod error;
pub mod eval;
pub mod head;
pub mod layers;
pub mod model;
pub mod optim;
pub mod post_backbone;
pub mod propagation;
pub mod rng;
pub mod synth;
pub mod train;
pub mod video;

pub use config::{Geometry, ModelConfig, Placement, PropKind};
pub use error::{Error, Result};
pub use model::{DetectConfig, VitTad};
pub use video::VideoClip;
