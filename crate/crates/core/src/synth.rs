//! Deterministic synthetic untrimmed videos with exact annotations.
//!
//! The background is uniform noise. Each action of class `c` is a bright
//! square translating with a class-specific direction and speed. The square
//! wraps around the frame edges, so every frame of every class carries the
//! same amount of brightness: classes differ by motion only.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::eval::{save_ground_truth, Annotation, GroundTruth, Segment, VideoAnnotations};
use crate::rng::indexed_rng;
use crate::video::{VideoClip, CHANNELS};

pub const SQUARE_SIZE: usize = 8;
pub const SQUARE_INTENSITY: f32 = 1.0;
/// Pixels per frame moved by classes `0..4`; each further group of four moves faster.
pub const BASE_SPEED: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub fps: f64,
    pub num_classes: usize,
    /// Inclusive range of actions per clip.
    pub actions: [usize; 2],
    /// Inclusive range of action lengths in frames.
    pub action_len: [usize; 2],
    /// Amplitude of the uniform background noise.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 32,
            height: 32,
            width: 32,
            fps: 8.0,
            num_classes: 2,
            actions: [1, 2],
            action_len: [8, 16],
            noise: 0.1,
        }
    }
}

/// One rendered action, in frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthAction {
    pub start: usize,
    pub end: usize,
    pub class_id: usize,
}

impl SynthAction {
    pub fn annotation(&self, fps: f64) -> Annotation {
        Annotation {
            start: self.start as f64 / fps,
            end: self.end as f64 / fps,
            label: self.class_id,
        }
    }
}

/// Unit step `(dy, dx)` and speed for a class.
pub fn motion(class_id: usize) -> ((isize, isize), usize) {
    let dir = [(0, 1), (1, 0), (0, -1), (-1, 0)][class_id % 4];
    (dir, BASE_SPEED * (1 + class_id / 4))
}

impl SynthSpec {
    /// `min_action_frames` is the shortest action the model can resolve,
    /// typically twice the temporal tubelet size.
    pub fn validate(&self, min_action_frames: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if [self.frames, self.height, self.width, self.num_classes].contains(&0) {
            return err("synthetic clip dimensions and class count must be positive".into());
        }
        if self.height < SQUARE_SIZE || self.width < SQUARE_SIZE {
            return err(format!("frames must be at least {SQUARE_SIZE}x{SQUARE_SIZE}"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        let [lo, hi] = self.action_len;
        if lo > hi || self.actions[0] > self.actions[1] {
            return err("ranges must be ordered [min, max]".into());
        }
        if lo < min_action_frames.max(1) {
            return err(format!("actions of {lo} frames are shorter than the minimum {min_action_frames}"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return err(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

/// Renders clip `index`; the result depends only on `(spec, index)`.
pub fn generate_clip(spec: &SynthSpec, index: u64) -> Result<(VideoClip, Vec<SynthAction>)> {
    let mut rng = indexed_rng(spec.seed, "synth.clip", index);
    let n = rng.random_range(spec.actions[0]..=spec.actions[1]);
    let lens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.action_len[0]..=spec.action_len[1]))
        .collect();
    let busy: usize = lens.iter().sum();
    if busy > spec.frames {
        return Err(Error::Generation(format!(
            "clip {index}: {n} actions need {busy} frames but the clip has {}",
            spec.frames
        )));
    }
    // spread the idle frames over the n + 1 gaps around the actions
    let mut gaps = vec![0usize; n + 1];
    for _ in 0..spec.frames - busy {
        gaps[rng.random_range(0..=n)] += 1;
    }
    let mut actions = Vec::with_capacity(n);
    let mut t = gaps[0];
    for (i, &len) in lens.iter().enumerate() {
        actions.push(SynthAction {
            start: t,
            end: t + len,
            class_id: rng.random_range(0..spec.num_classes),
        });
        t += len + gaps[i + 1];
    }

    let (h, w) = (spec.height, spec.width);
    let mut clip = VideoClip::zeros(spec.frames, h, w, spec.fps);
    for p in clip.pixels.iter_mut() {
        *p = rng.random::<f32>() * spec.noise;
    }
    for a in &actions {
        let ((dy, dx), speed) = motion(a.class_id);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        for f in a.start..a.end {
            let step = (f - a.start) * speed;
            let y = (y0 as isize + dy * step as isize).rem_euclid(h as isize) as usize;
            let x = (x0 as isize + dx * step as isize).rem_euclid(w as isize) as usize;
            let frame = clip.frame_mut(f);
            for sy in 0..SQUARE_SIZE {
                for sx in 0..SQUARE_SIZE {
                    let at = (((y + sy) % h) * w + (x + sx) % w) * CHANNELS;
                    frame[at..at + CHANNELS].fill(SQUARE_INTENSITY);
                }
            }
        }
    }
    Ok((clip, actions))
}

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

pub fn video_id(split: &str, index: u64) -> String {
    format!("{split}_{index:04}")
}

pub fn clip_path(root: &Path, split: &str, index: u64) -> PathBuf {
    root.join("clips").join(split).join(format!("{index}.vclip"))
}

pub fn annotation_path(root: &Path, split: &str) -> PathBuf {
    root.join("annotations").join(format!("{split}.json"))
}

/// Indices `0..n_train` form the training split and
/// `n_train..n_train + n_val` the validation split.
pub fn split_indices(n_train: usize, n_val: usize) -> [(&'static str, std::ops::Range<u64>); 2] {
    let (a, b) = (n_train as u64, (n_train + n_val) as u64);
    [(TRAIN_SPLIT, 0..a), (VAL_SPLIT, a..b)]
}

/// Writes both splits under `root` as `clips/{split}/{index}.vclip` and
/// `annotations/{split}.json`.
pub fn generate_dataset(spec: &SynthSpec, n_train: usize, n_val: usize, root: &Path) -> Result<()> {
    if n_train == 0 {
        return Err(Error::Config("n_train must be at least 1".into()));
    }
    for (split, range) in split_indices(n_train, n_val) {
        let dir = root.join("clips").join(split);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut gt = GroundTruth::new();
        for index in range {
            let (clip, actions) = generate_clip(spec, index)?;
            clip.save(&clip_path(root, split, index))?;
            gt.insert(
                video_id(split, index),
                VideoAnnotations {
                    duration_s: clip.duration_s(),
                    annotations: actions.iter().map(|a| a.annotation(spec.fps)).collect(),
                },
            );
        }
        let ann = root.join("annotations");
        std::fs::create_dir_all(&ann).map_err(io_err(&ann))?;
        save_ground_truth(&annotation_path(root, split), &gt)?;
    }
    Ok(())
}

/// A clip with its ground truth, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video_id: String,
    pub clip: VideoClip,
    pub segments: Vec<Segment>,
}

/// Loads one split written by [`generate_dataset`].
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let gt = crate::eval::load_ground_truth(&annotation_path(root, split))?;
    let prefix = format!("{split}_");
    gt.iter()
        .map(|(id, v)| {
            let index: u64 = id
                .strip_prefix(&prefix)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("unexpected video id {id} in split {split}")))?;
            let clip = VideoClip::load(&clip_path(root, split, index))?;
            let segments = v
                .annotations
                .iter()
                .map(|a| Segment {
                    video_id: id.clone(),
                    start_s: a.start,
                    end_s: a.end,
                    class_id: a.label,
                })
                .collect();
            Ok(Sample {
                video_id: id.clone(),
                clip,
                segments,
            })
        })
        .collect()
}

/// Generates a split in memory without touching the file system.
pub fn generate_samples(spec: &SynthSpec, split: &str, range: std::ops::Range<u64>) -> Result<Vec<Sample>> {
    range
        .map(|index| {
            let (clip, actions) = generate_clip(spec, index)?;
            let id = video_id(split, index);
            let segments = actions
                .iter()
                .map(|a| Segment {
                    video_id: id.clone(),
                    start_s: a.start as f64 / spec.fps,
                    end_s: a.end as f64 / spec.fps,
                    class_id: a.class_id,
                })
                .collect();
            Ok(Sample {
                video_id: id,
                clip,
                segments,
            })
        })
        .collect()
}

/// Training accuracy of a least-squares linear classifier that sees only the
/// mean pixel intensity of each action's frames.
pub fn mean_intensity_probe(spec: &SynthSpec, n_clips: u64) -> Result<f64> {
    let mut feats = Vec::new();
    for index in 0..n_clips {
        let (clip, actions) = generate_clip(spec, index)?;
        for a in actions {
            let px: f64 = (a.start..a.end)
                .flat_map(|f| clip.frame(f).iter().map(|&p| p as f64))
                .sum();
            feats.push((px / ((a.end - a.start) * clip.frame_len()) as f64, a.class_id));
        }
    }
    if feats.is_empty() {
        return Err(Error::Generation("probe needs at least one action".into()));
    }
    let k = spec.num_classes;
    // one-vs-rest fits of score_c = w_c·x + b_c against one-hot targets
    let n = feats.len() as f64;
    let mx = feats.iter().map(|f| f.0).sum::<f64>() / n;
    let vx = feats.iter().map(|f| (f.0 - mx).powi(2)).sum::<f64>();
    let models: Vec<(f64, f64)> = (0..k)
        .map(|c| {
            let y = |f: &(f64, usize)| if f.1 == c { 1.0 } else { 0.0 };
            let my = feats.iter().map(y).sum::<f64>() / n;
            let cov = feats.iter().map(|f| (f.0 - mx) * (y(f) - my)).sum::<f64>();
            let w = if vx > 0.0 { cov / vx } else { 0.0 };
            (w, my - w * mx)
        })
        .collect();
    let correct = feats
        .iter()
        .filter(|(x, c)| {
            let pred = (0..k)
                .max_by(|&a, &b| (models[a].0 * x + models[a].1).total_cmp(&(models[b].0 * x + models[b].1)))
                .expect("at least one class");
            pred == *c
        })
        .count();
    Ok(correct as f64 / n)
}
