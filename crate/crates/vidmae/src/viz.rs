//! PNG emission: per-frame grids of (original | candidate regions | mask
//! overlay | attention rollout) for qualitative inspection.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};

use crate::corpus::BBox;
use crate::error::{Result, VidmaeError};
use crate::pipeline::Clip;
use crate::sampler::MaskPlan;
use crate::tokenizer::TokenGeometry;
use crate::vision::bilinear_resize;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_to_image(frame: ArrayView2<f64>) -> RgbImage {
    let (h, w) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = to_u8(frame[[y as usize, x as usize]]);
        Rgb([g, g, g])
    })
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
    let (x1, y1) = (b.x_max.round() as i64, b.y_max.round() as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Darken every pixel of a masked token's spatial cell in its temporal slice.
fn mask_overlay(frame: ArrayView2<f64>, plan: &MaskPlan, geom: &TokenGeometry, t_slice: usize) -> RgbImage {
    let mut img = frame_to_image(frame);
    for &i in &plan.masked {
        let (t, h, w) = geom.coords(i);
        if t != t_slice {
            continue;
        }
        for dy in 0..geom.patch.ph {
            for dx in 0..geom.patch.pw {
                let (px, py) = ((w * geom.patch.pw + dx) as u32, (h * geom.patch.ph + dy) as u32);
                let p = img.get_pixel_mut(px, py);
                for c in p.0.iter_mut() {
                    *c /= 4;
                }
            }
        }
    }
    img
}

/// Blend a per-frame saliency map (max-normalized to 1) into the red channel.
fn heat_overlay(frame: ArrayView2<f64>, heat: &Array2<f64>) -> RgbImage {
    let (h, w) = frame.dim();
    let up = bilinear_resize(heat, h, w);
    let peak = up.iter().fold(0.0f64, |m, &v| m.max(v));
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = frame[[y as usize, x as usize]].clamp(0.0, 1.0);
        let s = if peak > 0.0 {
            up[[y as usize, x as usize]] / peak
        } else {
            0.0
        };
        Rgb([
            to_u8(g * (1.0 - s) + s),
            to_u8(g * (1.0 - s)),
            to_u8(g * (1.0 - s)),
        ])
    })
}

fn hcat(panels: &[RgbImage], gap: u32) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap();
    let w: u32 = panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + gap;
    }
    out
}

/// Write one grid PNG per temporal slice of the clip:
/// original | region boxes | mask overlay | rollout heatmap.
pub fn write_clip_panels(
    dir: &Path,
    clip: &Clip,
    geom: &TokenGeometry,
    plan: &MaskPlan,
    rollout: &Array3<f64>,
) -> Result<()> {
    if rollout.dim() != (geom.nt, geom.nh, geom.nw) {
        return Err(VidmaeError::Shape(format!(
            "rollout {:?} does not match token geometry ({}, {}, {})",
            rollout.dim(),
            geom.nt,
            geom.nh,
            geom.nw
        )));
    }
    fs::create_dir_all(dir).map_err(|e| VidmaeError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for t in 0..geom.nt {
        // first frame of the temporal slice stands in for the whole cube
        let frame = clip
            .frames
            .index_axis(ndarray::Axis(0), t * geom.patch.pt);
        let gray = frame.index_axis(ndarray::Axis(0), 0);

        let original = frame_to_image(gray);
        let mut regions = frame_to_image(gray);
        for b in &clip.boxes {
            draw_box(&mut regions, b, Rgb([0, 255, 0]));
        }
        let masked = mask_overlay(gray, plan, geom, t);
        let heat = rollout.index_axis(ndarray::Axis(0), t).to_owned();
        let attn = heat_overlay(gray, &heat);

        let grid = hcat(&[original, regions, masked, attn], 2);
        let path = dir.join(format!("panel_{t:02}.png"));
        grid.save(&path)
            .map_err(|e| VidmaeError::Format(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_video;
    use crate::pipeline::{subsample_and_clip, ClipMode, ClipProfile};
    use crate::sampler::{baseline_mask, MaskStrategy};
    use crate::tokenizer::{PatchSize, TokenGeometry};

    #[test]
    fn panels_are_written_for_every_temporal_slice() {
        let v = synth_video(0, true, 64, 32, 32, 5);
        let profile = ClipProfile {
            stride: 4,
            clip_len: 16,
            clips_per_video: 1,
            mode: ClipMode::Pretrain,
        };
        let mut clip = subsample_and_clip(&v, &profile, 0).unwrap().remove(0);
        clip.boxes = v.boxes_for_frame(0);
        let geom =
            TokenGeometry::for_clip(16, 32, 32, PatchSize { pt: 2, ph: 8, pw: 8 }).unwrap();
        let plan = baseline_mask(MaskStrategy::RandomPatch, &geom, 0.9, 3).unwrap();
        let rollout = Array3::from_elem((geom.nt, geom.nh, geom.nw), 0.5);
        let dir = tempfile::tempdir().unwrap();
        write_clip_panels(dir.path(), &clip, &geom, &plan, &rollout).unwrap();
        for t in 0..geom.nt {
            let p = dir.path().join(format!("panel_{t:02}.png"));
            let img = image::open(&p).unwrap().to_rgb8();
            // 4 panels of width 32 plus 3 gaps of 2
            assert_eq!(img.width(), 4 * 32 + 3 * 2);
            assert_eq!(img.height(), 32);
        }
    }
}
