//! Dense frame volumes and the raw `.vclip` file format.
//!
//! ```text
//! "VCLP" | version: u32 | T: u32 | H: u32 | W: u32 | channels: u32 | fps: f64 | pixels: f32 × T·H·W·channels
//! ```
//! All fields little-endian, pixels row-major `T×H×W×channels`.

use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const CLIP_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Row-major `frames × height × width × 3`.
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, fps: f64, pixels: Vec<f32>) -> Result<Self> {
        if frames * height * width * CHANNELS != pixels.len() {
            return Err(Error::Format(format!(
                "clip {frames}x{height}x{width}x{CHANNELS} does not match {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("clip contains non-finite pixels".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            fps,
            pixels,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, fps: f64) -> Self {
        Self {
            frames,
            height,
            width,
            fps,
            pixels: vec![0.0; frames * height * width * CHANNELS],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.pixels[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.pixels[t * n..(t + 1) * n]
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    /// Frames `[start, end)` as a new clip.
    pub fn sub_clip(&self, start: usize, end: usize) -> Self {
        let n = self.frame_len();
        Self {
            frames: end - start,
            height: self.height,
            width: self.width,
            fps: self.fps,
            pixels: self.pixels[start * n..end * n].to_vec(),
        }
    }

    pub fn concat(parts: &[VideoClip]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Format("no clips to concatenate".into()))?;
        let mut pixels = Vec::new();
        let mut frames = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Format("frame sizes differ".into()));
            }
            frames += p.frames;
            pixels.extend_from_slice(&p.pixels);
        }
        Self::new(frames, first.height, first.width, first.fps, pixels)
    }

    /// Circular shift of every frame by `(dy, dx)` pixels.
    pub fn roll_spatial(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for t in 0..self.frames {
            let src = self.frame(t);
            let dst = out.frame_mut(t);
            for y in 0..h {
                for x in 0..w {
                    let to = (((y + dy) % h) * w + (x + dx) % w) * CHANNELS;
                    let from = (y * w + x) * CHANNELS;
                    dst[to..to + CHANNELS].copy_from_slice(&src[from..from + CHANNELS]);
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.pixels.len() * 4);
        out.extend_from_slice(CLIP_MAGIC);
        for v in [CLIP_VERSION, self.frames as u32, self.height as u32, self.width as u32, CHANNELS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.fps.to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 5 * 4 + 8;
        if bytes.len() < HEADER || &bytes[..4] != CLIP_MAGIC {
            return Err(Error::Format("not a .vclip file".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if u32_at(4) != CLIP_VERSION as usize {
            return Err(Error::Format(format!("unsupported clip version {}", u32_at(4))));
        }
        let (t, h, w, c) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        if c != CHANNELS {
            return Err(Error::Format(format!("expected {CHANNELS} channels, found {c}")));
        }
        let fps = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let payload = &bytes[HEADER..];
        if payload.len() != t * h * w * c * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                t * h * w * c * 4
            )));
        }
        let pixels = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(t, h, w, fps, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
