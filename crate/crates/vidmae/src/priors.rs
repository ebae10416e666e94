//! Candidate-region acquisition, per-clip box union, the per-token inflation
//! vector, and detector-quality metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_boxes_file, BBox, VideoSample};
use crate::error::{Result, VidmaeError};
use crate::tokenizer::TokenGeometry;
use crate::vision::{gaussian_smooth, local_variance};

/// Upper bound on the probability inflation; the boost must stay below it.
pub const PI_DELTA: f64 = 0.25;

/// Where candidate region boxes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionProviderKind {
    /// Use the dataset's ground-truth boxes.
    GroundTruth,
    /// Read boxes from a file in the shared boxes format.
    File(PathBuf),
    /// Detector stand-in: salient connected components.
    Saliency { threshold: f64 },
}

impl RegionProviderKind {
    /// Parse the config form `ground_truth | file:<path> | saliency`.
    pub fn parse(s: &str) -> Result<RegionProviderKind> {
        if s == "ground_truth" {
            Ok(RegionProviderKind::GroundTruth)
        } else if s == "saliency" {
            Ok(RegionProviderKind::Saliency { threshold: 0.95 })
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(RegionProviderKind::File(PathBuf::from(path)))
        } else {
            Err(VidmaeError::Config(format!(
                "unknown region_provider `{s}` (expected ground_truth | file:<path> | saliency)"
            )))
        }
    }

    /// Candidate boxes per frame for one video. Deterministic given inputs.
    pub fn boxes(&self, video: &VideoSample) -> Result<Vec<(usize, BBox)>> {
        match self {
            RegionProviderKind::GroundTruth => Ok(video.gt_boxes.clone()),
            RegionProviderKind::File(path) => {
                read_boxes_file(path, video.width(), video.height(), video.n_frames())
            }
            RegionProviderKind::Saliency { threshold } => {
                Ok(saliency_stub_provider(video, *threshold))
            }
        }
    }
}

/// Union of candidate boxes over a clip's source frames. The union is a set
/// of boxes (membership = inside any box), deduplicated, not a bounding hull.
pub fn clip_region_union(
    boxes_per_frame: &BTreeMap<usize, Vec<BBox>>,
    clip_source_frames: &[usize],
) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for f in clip_source_frames {
        if let Some(boxes) = boxes_per_frame.get(f) {
            for b in boxes {
                if !out.contains(b) {
                    out.push(*b);
                }
            }
        }
    }
    out
}

pub fn group_boxes_by_frame(boxes: &[(usize, BBox)]) -> BTreeMap<usize, Vec<BBox>> {
    let mut map: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    for (f, b) in boxes {
        map.entry(*f).or_default().push(*b);
    }
    map
}

/// Per-token inflation vector: `pi_value` for every token whose spatial
/// center lies inside some clip box (boundary inclusive), zero elsewhere.
pub fn build_pi(clip_boxes: &[BBox], geom: &TokenGeometry, pi_value: f64) -> Result<Vec<f64>> {
    if !(0.0..PI_DELTA).contains(&pi_value) {
        return Err(VidmaeError::Config(format!(
            "pi_value must be in [0, {PI_DELTA}), got {pi_value}"
        )));
    }
    let n = geom.n_tokens();
    let mut pi = vec![0.0; n];
    if pi_value == 0.0 {
        return Ok(pi);
    }
    for (i, p) in pi.iter_mut().enumerate() {
        let (x, y) = geom.token_center(i)?;
        if clip_boxes.iter().any(|b| b.contains(x, y)) {
            *p = pi_value;
        }
    }
    Ok(pi)
}

fn connected_component_boxes(mask: &Array2<bool>, min_area: usize) -> Vec<BBox> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            let mut area = 0usize;
            stack.push((sy, sx));
            seen[[sy, sx]] = true;
            while let Some((y, x)) = stack.pop() {
                area += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            if area >= min_area {
                out.push(BBox {
                    x_min: x0 as f64,
                    y_min: y0 as f64,
                    x_max: (x1 + 1) as f64,
                    y_max: (y1 + 1) as f64,
                });
            }
        }
    }
    out
}

/// Detector stand-in: per frame, smooth |frame - per-video median frame| plus
/// a local variance map, threshold at the given intensity quantile, and
/// return bounding boxes of connected components covering at least 0.5% of
/// the frame. Deterministic.
pub fn saliency_stub_provider(video: &VideoSample, threshold: f64) -> Vec<(usize, BBox)> {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "saliency threshold must be in (0,1)"
    );
    let (h, w) = (video.height(), video.width());
    let f = video.n_frames();
    // per-pixel median over frames (channel 0; frames are replicated gray or
    // near-gray, the median of one channel is representative)
    let mut median = Array2::zeros((h, w));
    let mut vals = vec![0.0f64; f];
    for y in 0..h {
        for x in 0..w {
            for t in 0..f {
                vals[t] = video.frames[[t, 0, y, x]];
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median[[y, x]] = if f % 2 == 1 {
                vals[f / 2]
            } else {
                0.5 * (vals[f / 2 - 1] + vals[f / 2])
            };
        }
    }
    let min_area = ((h * w) as f64 * 0.005).ceil() as usize;
    let mut out = Vec::new();
    for t in 0..f {
        let frame = video
            .frames
            .index_axis(ndarray::Axis(0), t)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let diff = (&frame - &median).mapv(f64::abs);
        let sal = gaussian_smooth(&diff, 1.5) + &(local_variance(&frame, 2) * 4.0);
        // intensity quantile threshold
        let mut sorted: Vec<f64> = sal.iter().cloned().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = sorted[((sorted.len() - 1) as f64 * threshold).floor() as usize];
        let mask = sal.mapv(|v| v > q);
        for b in connected_component_boxes(&mask, min_area) {
            out.push((t, b));
        }
    }
    out
}

/// Detector-quality metrics against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// A prediction is a true positive iff its center lies in some ground-truth
/// box; a ground-truth box is recalled iff some prediction's center lies in
/// it; mIoU is the mean over ground-truth boxes of the max IoU against the
/// predictions.
pub fn evaluate_regions(pred: &[BBox], gt: &[BBox]) -> RegionMetrics {
    let tp = pred
        .iter()
        .filter(|p| {
            let (cx, cy) = p.center();
            gt.iter().any(|g| g.contains(cx, cy))
        })
        .count();
    let precision = if pred.is_empty() {
        if gt.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / pred.len() as f64
    };
    let recalled = gt
        .iter()
        .filter(|g| {
            pred.iter().any(|p| {
                let (cx, cy) = p.center();
                g.contains(cx, cy)
            })
        })
        .count();
    let recall = if gt.is_empty() {
        1.0
    } else {
        recalled as f64 / gt.len() as f64
    };
    let miou = if gt.is_empty() {
        1.0
    } else {
        gt.iter()
            .map(|g| {
                pred.iter()
                    .map(|p| g.iou(p))
                    .fold(0.0f64, f64::max)
            })
            .sum::<f64>()
            / gt.len() as f64
    };
    RegionMetrics {
        miou,
        precision,
        recall,
    }
}
