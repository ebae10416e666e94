//! Temporal sub-sampling, clip extraction, spatial resize, and pretraining
//! augmentations.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, VideoSample};
use crate::error::{Result, VidmaeError};
use crate::vision::bilinear_resize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClipProfile {
    pub stride: usize,
    pub clip_len: usize,
    pub clips_per_video: usize,
    pub mode: ClipMode,
}

impl ClipProfile {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(VidmaeError::Config("clip stride must be >= 1".into()));
        }
        if self.clip_len < 2 || self.clip_len % 2 != 0 {
            return Err(VidmaeError::Config(format!(
                "clip_len must be even and >= 2, got {}",
                self.clip_len
            )));
        }
        if self.clips_per_video < 1 {
            return Err(VidmaeError::Config("clips_per_video must be >= 1".into()));
        }
        Ok(())
    }
}

/// One clip of `clip_len` frames, (T, 3, H', W') in [0, 1].
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Array4<f64>,
    pub video_id: String,
    /// Original-video frame indices the clip was built from (before padding).
    pub source_frames: Vec<usize>,
    /// Number of trailing frames that are repeats of the last real frame.
    pub padded: usize,
    /// Region boxes attached to the clip (clip-level union); transformed
    /// alongside the frames by augmentation and resize.
    pub boxes: Vec<BBox>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

fn build_clip(video: &VideoSample, window: &[usize], clip_len: usize) -> Clip {
    let (h, w) = (video.height(), video.width());
    let mut frames = Array4::zeros((clip_len, 3, h, w));
    let mut padded = 0;
    for t in 0..clip_len {
        let src = if t < window.len() {
            window[t]
        } else {
            padded += 1;
            *window.last().unwrap()
        };
        frames
            .index_axis_mut(Axis(0), t)
            .assign(&video.frames.index_axis(Axis(0), src));
    }
    Clip {
        frames,
        video_id: video.id.clone(),
        source_frames: window.to_vec(),
        padded,
        boxes: Vec::new(),
    }
}

/// Sub-sample frames at the profile stride and cut clips.
///
/// Pretrain: partition the sub-sampled sequence into consecutive
/// non-overlapping `clip_len` windows (remainder dropped) and randomly pick
/// `clips_per_video` of them, with replacement iff fewer windows exist than
/// requested. Finetune: `clips_per_video` uniformly spaced window starts,
/// deterministic, consuming no randomness. Sequences shorter than `clip_len`
/// are padded by repeating the last frame.
pub fn subsample_and_clip(
    video: &VideoSample,
    profile: &ClipProfile,
    seed: u64,
) -> Result<Vec<Clip>> {
    profile.validate()?;
    if video.n_frames() < 1 {
        return Err(VidmaeError::Contract("video has no frames".into()));
    }
    let sub: Vec<usize> = (0..video.n_frames()).step_by(profile.stride).collect();
    let t = profile.clip_len;

    if sub.len() < t {
        // single padded window in either mode
        let mut clips = Vec::new();
        for _ in 0..profile.clips_per_video {
            clips.push(build_clip(video, &sub, t));
        }
        return Ok(clips);
    }

    match profile.mode {
        ClipMode::Pretrain => {
            let n_windows = sub.len() / t;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picks: Vec<usize> = if n_windows >= profile.clips_per_video {
                // without replacement
                let mut idx: Vec<usize> = (0..n_windows).collect();
                use rand::seq::SliceRandom;
                idx.shuffle(&mut rng);
                idx.truncate(profile.clips_per_video);
                idx
            } else {
                (0..profile.clips_per_video)
                    .map(|_| rng.gen_range(0..n_windows))
                    .collect()
            };
            Ok(picks
                .into_iter()
                .map(|wi| build_clip(video, &sub[wi * t..(wi + 1) * t], t))
                .collect())
        }
        ClipMode::Finetune => {
            let max_start = sub.len() - t;
            let k = profile.clips_per_video;
            let starts: Vec<usize> = if k == 1 {
                vec![0]
            } else {
                (0..k)
                    .map(|j| ((j as f64) * (max_start as f64) / ((k - 1) as f64)).round() as usize)
                    .collect()
            };
            Ok(starts
                .into_iter()
                .map(|s| build_clip(video, &sub[s..s + t], t))
                .collect())
        }
    }
}

/// Bilinear resize of every frame and channel; boxes are rescaled with the
/// same factors. `patch_spatial` guards the divisibility precondition.
pub fn resize_clip(clip: &Clip, target: (usize, usize), patch_spatial: (usize, usize)) -> Result<Clip> {
    let (th, tw) = target;
    let (ph, pw) = patch_spatial;
    if th % ph != 0 || tw % pw != 0 {
        return Err(VidmaeError::Config(format!(
            "resize target {th}x{tw} not divisible by spatial patch size {ph}x{pw}"
        )));
    }
    let (h, w) = (clip.height(), clip.width());
    let mut frames = Array4::zeros((clip.len(), 3, th, tw));
    for t in 0..clip.len() {
        for c in 0..3 {
            let plane = clip
                .frames
                .index_axis(Axis(0), t)
                .index_axis(Axis(0), c)
                .to_owned();
            frames
                .index_axis_mut(Axis(0), t)
                .index_axis_mut(Axis(0), c)
                .assign(&bilinear_resize(&plane, th, tw));
        }
    }
    let sy = th as f64 / h as f64;
    let sx = tw as f64 / w as f64;
    let boxes = clip
        .boxes
        .iter()
        .map(|b| BBox {
            x_min: b.x_min * sx,
            y_min: b.y_min * sy,
            x_max: b.x_max * sx,
            y_max: b.y_max * sy,
        })
        .collect();
    Ok(Clip {
        frames,
        video_id: clip.video_id.clone(),
        source_frames: clip.source_frames.clone(),
        padded: clip.padded,
        boxes,
    })
}

/// Reflect a box horizontally in a frame of the given width.
pub fn hflip_box(b: &BBox, width: usize) -> BBox {
    BBox {
        x_min: width as f64 - b.x_max,
        y_min: b.y_min,
        x_max: width as f64 - b.x_min,
        y_max: b.y_max,
    }
}

fn hflip_frames(frames: &Array4<f64>) -> Array4<f64> {
    let (t, c, h, w) = frames.dim();
    let mut out = Array4::zeros((t, c, h, w));
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ti, ci, y, x]] = frames[[ti, ci, y, w - 1 - x]];
                }
            }
        }
    }
    out
}

/// Pretraining augmentations: random resized crop (area in [0.5, 1.0]),
/// horizontal flip with probability 0.5, and +-10% scale jitter. The same
/// spatial transform is applied to every frame and to the attached boxes.
pub fn augment_clip(clip: &Clip, seed: u64) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (clip.height(), clip.width());
    let mut out = clip.clone();

    // random resized crop, re-drawn on degenerate windows
    let mut crop = None;
    for _ in 0..10 {
        let area = rng.gen_range(0.5..=1.0) * (h * w) as f64;
        let aspect = rng.gen_range(0.9..1.1);
        let ch = (area / aspect).sqrt().round() as usize;
        let cw = (area * aspect).sqrt().round() as usize;
        if ch >= 8 && cw >= 8 && ch <= h && cw <= w {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            crop = Some((y0, x0, ch, cw));
            break;
        }
    }
    if let Some((y0, x0, ch, cw)) = crop {
        let mut cropped = Array4::zeros((clip.len(), 3, ch, cw));
        cropped.assign(&out.frames.slice(ndarray::s![.., .., y0..y0 + ch, x0..x0 + cw]));
        out.frames = cropped;
        out.boxes = out
            .boxes
            .iter()
            .filter_map(|b| {
                let nb = BBox {
                    x_min: (b.x_min - x0 as f64).max(0.0),
                    y_min: (b.y_min - y0 as f64).max(0.0),
                    x_max: (b.x_max - x0 as f64).min(cw as f64),
                    y_max: (b.y_max - y0 as f64).min(ch as f64),
                };
                (nb.x_min < nb.x_max && nb.y_min < nb.y_max).then_some(nb)
            })
            .collect();
        out = resize_clip(&out, (h, w), (1, 1)).expect("resize back after crop");
    }

    if rng.gen_bool(0.5) {
        out.frames = hflip_frames(&out.frames);
        out.boxes = out.boxes.iter().map(|b| hflip_box(b, w)).collect();
    }

    // scale jitter: resize to s*(H,W) then back; box coordinates are
    // unchanged by the round trip
    let s: f64 = rng.gen_range(0.9..1.1);
    let jh = ((h as f64 * s).round() as usize).max(8);
    let jw = ((w as f64 * s).round() as usize).max(8);
    if (jh, jw) != (h, w) {
        let boxes = out.boxes.clone();
        let jittered = resize_clip(&out, (jh, jw), (1, 1)).expect("scale jitter resize");
        out = resize_clip(&jittered, (h, w), (1, 1)).expect("scale jitter resize back");
        out.boxes = boxes;
    }
    out
}
