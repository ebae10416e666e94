//! Synthetic ultrasound-like corpus generation, on-disk dataset format,
//! ingestion of external frame sequences, and patient-wise split construction.
//!
//! On-disk layout: one directory per video holding zero-padded-index PNG
//! frames plus a `boxes.csv`, and a top-level `manifest.csv` with columns
//! `id,path,label,patient_id,fold`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VidmaeError};
use crate::par::parallel_map;
use crate::vision::gaussian_smooth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn from_index(i: usize) -> Result<Label> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            _ => Err(VidmaeError::Format(format!("label must be 0 or 1, got {i}"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<BBox> {
        let b = BBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(VidmaeError::Format(format!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        if self.x_min < 0.0 || self.y_min < 0.0 {
            return Err(VidmaeError::Format(format!(
                "negative box coordinates ({}, {})",
                self.x_min, self.y_min
            )));
        }
        Ok(())
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.x_max <= width as f64 && self.y_max <= height as f64
    }

    /// Boundary-inclusive containment on all four edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Synthetic,
    Ingested,
}

/// A labeled frame sequence with optional per-frame ground-truth boxes.
/// Frames are (F, 3, H, W) intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub patient_id: String,
    pub frames: Array4<f64>,
    pub label: Label,
    pub gt_boxes: Vec<(usize, BBox)>,
    pub source: SampleSource,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames() < 1 {
            return Err(VidmaeError::Format("video has no frames".into()));
        }
        if !self.frames.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(VidmaeError::Format(format!(
                "video {} has intensities outside [0,1]",
                self.id
            )));
        }
        for (fi, b) in &self.gt_boxes {
            b.validate()?;
            if *fi >= self.n_frames() || !b.in_bounds(self.width(), self.height()) {
                return Err(VidmaeError::Format(format!(
                    "gt box out of bounds in video {} frame {fi}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn boxes_for_frame(&self, frame: usize) -> Vec<BBox> {
        self.gt_boxes
            .iter()
            .filter(|(fi, _)| *fi == frame)
            .map(|(_, b)| *b)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub patient_id: String,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distinct_patients(&self) -> Vec<String> {
        let mut ps: Vec<String> = self.entries.iter().map(|e| e.patient_id.clone()).collect();
        ps.sort();
        ps.dedup();
        ps
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut fs: Vec<usize> = self.entries.iter().filter_map(|e| e.fold).collect();
        fs.sort_unstable();
        fs.dedup();
        fs
    }

    /// All videos of one patient must sit in one fold.
    pub fn check_patient_closure(&self) -> Result<()> {
        for p in self.distinct_patients() {
            let folds: Vec<Option<usize>> = self
                .entries
                .iter()
                .filter(|e| e.patient_id == p)
                .map(|e| e.fold)
                .collect();
            if folds.windows(2).any(|w| w[0] != w[1]) {
                return Err(VidmaeError::Format(format!(
                    "patient {p} spans multiple folds"
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,path,label,patient_id,fold\n");
        for e in &self.entries {
            let fold = e.fold.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.id,
                e.path.display(),
                e.label,
                e.patient_id,
                fold
            ));
        }
        fs::write(path, out).map_err(|e| VidmaeError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| VidmaeError::io(path, e))?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "id,path,label,patient_id,fold" => {}
            _ => {
                return Err(VidmaeError::Parse {
                    path: path.into(),
                    line: 1,
                    message: "expected header `id,path,label,patient_id,fold`".into(),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(VidmaeError::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("expected 5 columns, got {}", parts.len()),
                });
            }
            let label_idx: usize = parts[2].trim().parse().map_err(|_| VidmaeError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("bad label `{}`", parts[2]),
            })?;
            let fold = if parts[4].trim().is_empty() {
                None
            } else {
                Some(parts[4].trim().parse().map_err(|_| VidmaeError::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("bad fold `{}`", parts[4]),
                })?)
            };
            entries.push(ManifestEntry {
                id: parts[0].trim().to_string(),
                path: PathBuf::from(parts[1].trim()),
                label: Label::from_index(label_idx)?,
                patient_id: parts[3].trim().to_string(),
                fold,
            });
        }
        Ok(DatasetManifest { entries })
    }
}

/// Boxes file: comma-separated `frame_index,x_min,y_min,x_max,y_max` rows.
pub fn write_boxes_file(path: &Path, boxes: &[(usize, BBox)]) -> Result<()> {
    let mut out = String::new();
    for (fi, b) in boxes {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            fi, b.x_min, b.y_min, b.x_max, b.y_max
        ));
    }
    fs::write(path, out).map_err(|e| VidmaeError::io(path, e))
}

/// Parse a boxes file, checking every box against the given frame bounds.
pub fn read_boxes_file(
    path: &Path,
    width: usize,
    height: usize,
    n_frames: usize,
) -> Result<Vec<(usize, BBox)>> {
    let text = fs::read_to_string(path).map_err(|e| VidmaeError::io(path, e))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| VidmaeError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("bad number `{s}`"),
            })
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(VidmaeError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected 5 columns, got {}", parts.len()),
            });
        }
        let fi: usize = parts[0].trim().parse().map_err(|_| VidmaeError::Parse {
            path: path.into(),
            line: i + 1,
            message: format!("bad frame index `{}`", parts[0]),
        })?;
        let b = BBox::new(parse(parts[1])?, parse(parts[2])?, parse(parts[3])?, parse(parts[4])?)
            .map_err(|e| VidmaeError::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if fi >= n_frames || !b.in_bounds(width, height) {
            return Err(VidmaeError::Parse {
                path: path.into(),
                line: i + 1,
                message: format!(
                    "box out of bounds for {width}x{height} frames ({n_frames} frames)"
                ),
            });
        }
        boxes.push((fi, b));
    }
    Ok(boxes)
}

// ---------------------------------------------------------------------------
// Synthetic generation

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

/// Generate one synthetic video deterministically from (seed, index).
pub fn synth_video(
    index: usize,
    malignant: bool,
    frames_per_video: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = (height as f64, width as f64);
    let min_dim = h.min(w);

    // Dark smooth-boundary ellipse ("organ") near the frame center.
    let organ = Ellipse {
        cx: w * rng.gen_range(0.40..0.60),
        cy: h * rng.gen_range(0.40..0.60),
        a: min_dim * rng.gen_range(0.16..0.22),
        b: min_dim * rng.gen_range(0.14..0.20),
    };

    // Bright textured blob ("lesion") anchored to the ellipse boundary,
    // drifting at most 1 px/frame.
    let lesion_r = min_dim * rng.gen_range(0.10..0.14);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut lcx = organ.cx + organ.a * angle.cos();
    let mut lcy = organ.cy + organ.b * angle.sin();
    let vel_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.3..0.9); // px per frame
    let (vx, vy) = (speed * vel_angle.cos(), speed * vel_angle.sin());
    let tex_phase = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));

    // Static multiplicative speckle field for the whole video.
    let mut noise = Array2::zeros((height, width));
    for v in noise.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let smooth = gaussian_smooth(&noise, 1.0);
    let mean = smooth.mean().unwrap();
    let std = (smooth.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()).sqrt().max(1e-9);
    let speckle = smooth.mapv(|v| 1.0 + 0.25 * (v - mean) / std);

    let mut frames = Array4::zeros((frames_per_video, 3, height, width));
    let mut gt_boxes = Vec::with_capacity(frames_per_video);
    for t in 0..frames_per_video {
        // keep the lesion inside the frame
        if malignant {
            lcx = (lcx + vx).clamp(lesion_r, w - lesion_r);
            lcy = (lcy + vy).clamp(lesion_r, h - lesion_r);
        }
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.35; // speckle background
                let e = ((xf - organ.cx) / organ.a).powi(2) + ((yf - organ.cy) / organ.b).powi(2);
                if e < 1.2 {
                    // smooth boundary over e in [0.85, 1.2]
                    let blend = ((1.2 - e) / 0.35).clamp(0.0, 1.0);
                    v = v * (1.0 - blend) + 0.22 * blend;
                }
                if malignant {
                    let dr = ((xf - lcx).powi(2) + (yf - lcy).powi(2)).sqrt();
                    if dr < lesion_r {
                        let blend = ((lesion_r - dr) / (0.25 * lesion_r)).clamp(0.0, 1.0);
                        let tex = 0.12
                            * (2.1 * xf + tex_phase.0).sin()
                            * (1.7 * yf + tex_phase.1).cos();
                        v = v * (1.0 - blend) + (0.88 + tex) * blend;
                    }
                }
                let jitter = ((t * 7919 + y * 31 + x * 17) % 97) as f64 / 97.0 - 0.5;
                let px = (v * speckle[[y, x]] + 0.02 * jitter).clamp(0.0, 1.0);
                for c in 0..3 {
                    frames[[t, c, y, x]] = px;
                }
            }
        }
        // tight box over ellipse union lesion
        let mut x_min = organ.cx - organ.a;
        let mut x_max = organ.cx + organ.a;
        let mut y_min = organ.cy - organ.b;
        let mut y_max = organ.cy + organ.b;
        if malignant {
            x_min = x_min.min(lcx - lesion_r);
            x_max = x_max.max(lcx + lesion_r);
            y_min = y_min.min(lcy - lesion_r);
            y_max = y_max.max(lcy + lesion_r);
        }
        gt_boxes.push((
            t,
            BBox {
                x_min: x_min.max(0.0),
                y_min: y_min.max(0.0),
                x_max: x_max.min(w),
                y_max: y_max.min(h),
            },
        ));
    }

    VideoSample {
        id: format!("vid_{index:04}"),
        patient_id: format!("pat_{index:04}"),
        frames,
        label: if malignant { Label::Malignant } else { Label::Benign },
        gt_boxes,
        source: SampleSource::Synthetic,
    }
}

fn save_frame_png(path: &Path, frame: ndarray::ArrayView2<f64>) -> Result<()> {
    let (h, w) = frame.dim();
    let mut buf = Vec::with_capacity(h * w);
    for v in frame.iter() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("frame buffer size mismatch");
    img.save(path)
        .map_err(|e| VidmaeError::Format(format!("failed to write {}: {e}", path.display())))
}

/// Write a video directory: zero-padded PNG frames + `boxes.csv`.
pub fn write_video(dir: &Path, video: &VideoSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VidmaeError::io(dir, e))?;
    for t in 0..video.n_frames() {
        let frame = video.frames.index_axis(ndarray::Axis(0), t);
        let gray = frame.index_axis(ndarray::Axis(0), 0);
        save_frame_png(&dir.join(format!("frame_{t:04}.png")), gray)?;
    }
    write_boxes_file(&dir.join("boxes.csv"), &video.gt_boxes)
}

/// Generate `n_videos` synthetic videos under `out_dir`, write the manifest,
/// and return it (folds unassigned).
pub fn generate_synthetic_corpus(
    out_dir: &Path,
    n_videos: usize,
    frames_per_video: usize,
    frame_size: (usize, usize),
    malignant_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_videos < 2 {
        return Err(VidmaeError::Config(format!(
            "n_videos must be >= 2, got {n_videos}"
        )));
    }
    if frame_size.0 < 32 || frame_size.1 < 32 {
        return Err(VidmaeError::Config(format!(
            "frame size must be at least 32x32, got {}x{}",
            frame_size.0, frame_size.1
        )));
    }
    if frames_per_video < 1 {
        return Err(VidmaeError::Config("frames_per_video must be >= 1".into()));
    }
    if !(0.0 < malignant_fraction && malignant_fraction < 1.0) {
        return Err(VidmaeError::Config(format!(
            "malignant_fraction must be in (0,1), got {malignant_fraction}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| VidmaeError::io(out_dir, e))?;

    let n_malignant = (n_videos as f64 * malignant_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_videos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut malignant = vec![false; n_videos];
    for &i in order.iter().take(n_malignant) {
        malignant[i] = true;
    }

    let indices: Vec<usize> = (0..n_videos).collect();
    let videos = parallel_map(&indices, |&i| {
        synth_video(i, malignant[i], frames_per_video, frame_size.0, frame_size.1, seed)
    });

    let mut entries = Vec::with_capacity(n_videos);
    for video in &videos {
        let dir = out_dir.join(&video.id);
        write_video(&dir, video)?;
        entries.push(ManifestEntry {
            id: video.id.clone(),
            path: dir,
            label: video.label,
            patient_id: video.patient_id.clone(),
            fold: None,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn list_image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| VidmaeError::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| matches!(e.to_str(), Some("png") | Some("PNG")))
                .unwrap_or(false)
        })
        .collect();
    files.sort(); // lexicographic order = temporal order
    if files.is_empty() {
        return Err(VidmaeError::NotFound(format!(
            "no image files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Load a frame-sequence directory into a `VideoSample`. Grayscale inputs are
/// replicated to three channels; intensities are normalized to [0, 1].
pub fn ingest_frame_sequence(
    dir: &Path,
    id: &str,
    label: Label,
    patient_id: &str,
    boxes_file: Option<&Path>,
) -> Result<VideoSample> {
    let files = list_image_files(dir)?;
    let mut frames_opt: Option<Array4<f64>> = None;
    let mut dims = (0usize, 0usize);
    for (t, file) in files.iter().enumerate() {
        let img = image::open(file)
            .map_err(|e| VidmaeError::Format(format!("cannot decode {}: {e}", file.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let frames = match &mut frames_opt {
            None => {
                dims = (h, w);
                frames_opt = Some(Array4::zeros((files.len(), 3, h, w)));
                frames_opt.as_mut().unwrap()
            }
            Some(f) => {
                if (h, w) != dims {
                    return Err(VidmaeError::Format(format!(
                        "mixed frame dimensions: {} is {}x{}, expected {}x{}",
                        file.display(),
                        h,
                        w,
                        dims.0,
                        dims.1
                    )));
                }
                f
            }
        };
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    frames[[t, c, y, x]] = p.0[c] as f64 / 255.0;
                }
            }
        }
    }
    let frames = frames_opt.unwrap();
    let gt_boxes = match boxes_file {
        Some(bf) => read_boxes_file(bf, dims.1, dims.0, files.len())?,
        None => Vec::new(),
    };
    let sample = VideoSample {
        id: id.to_string(),
        patient_id: patient_id.to_string(),
        frames,
        label,
        gt_boxes,
        source: SampleSource::Ingested,
    };
    sample.validate()?;
    Ok(sample)
}

/// Load a manifest entry's video from disk (frames + boxes.csv when present).
pub fn load_video(entry: &ManifestEntry) -> Result<VideoSample> {
    let boxes_path = entry.path.join("boxes.csv");
    let boxes = if boxes_path.exists() { Some(boxes_path) } else { None };
    let mut v = ingest_frame_sequence(
        &entry.path,
        &entry.id,
        entry.label,
        &entry.patient_id,
        boxes.as_deref(),
    )?;
    v.patient_id = entry.patient_id.clone();
    v.source = SampleSource::Synthetic;
    Ok(v)
}

/// Partition patients (not videos) into k near-equal folds, deterministically.
pub fn make_patient_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(VidmaeError::Config(format!("k must be >= 2, got {k}")));
    }
    let mut patients = manifest.distinct_patients();
    if patients.len() < k {
        return Err(VidmaeError::Config(format!(
            "need at least {k} patients for {k} folds, have {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let mut out = manifest.clone();
    for e in &mut out.entries {
        let pos = patients.iter().position(|p| p == &e.patient_id).unwrap();
        e.fold = Some(pos % k);
    }
    out.check_patient_closure()?;
    Ok(out)
}
