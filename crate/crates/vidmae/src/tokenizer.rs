//! Cube tokenization: learnable patch embedding over flattened spatiotemporal
//! cubes, fixed periodic positional encoding, index geometry, and normalized
//! reconstruction targets.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, VidmaeError};
use crate::nn::Bindings;
use crate::pipeline::Clip;

pub const TARGET_EPS: f64 = 1e-6;

/// Cube size (pt, ph, pw); the channel dimension is always fully spanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchSize {
    /// Flattened pixel-cube length pt * 3 * ph * pw.
    pub fn cube_len(&self) -> usize {
        self.pt * 3 * self.ph * self.pw
    }
}

/// Token index geometry of one clip. Ordering is time-major, then height,
/// then width: i = t*(nh*nw) + h*nw + w.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
    pub patch: PatchSize,
}

impl TokenGeometry {
    pub fn for_clip(clip_len: usize, height: usize, width: usize, patch: PatchSize) -> Result<TokenGeometry> {
        if clip_len % patch.pt != 0 || height % patch.ph != 0 || width % patch.pw != 0 {
            return Err(VidmaeError::Config(format!(
                "clip {clip_len}x{height}x{width} not divisible by patch ({}, 3, {}, {})",
                patch.pt, patch.ph, patch.pw
            )));
        }
        Ok(TokenGeometry {
            nt: clip_len / patch.pt,
            nh: height / patch.ph,
            nw: width / patch.pw,
            patch,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        t * self.nh * self.nw + h * self.nw + w
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let t = i / (self.nh * self.nw);
        let r = i % (self.nh * self.nw);
        (t, r / self.nw, r % self.nw)
    }

    /// Spatial center of token `i` in pixel units.
    pub fn token_center(&self, i: usize) -> Result<(f64, f64)> {
        if i >= self.n_tokens() {
            return Err(VidmaeError::Contract(format!(
                "token index {i} out of range (N = {})",
                self.n_tokens()
            )));
        }
        let (_, h, w) = self.coords(i);
        Ok((
            (w as f64 + 0.5) * self.patch.pw as f64,
            (h as f64 + 0.5) * self.patch.ph as f64,
        ))
    }

    /// Temporal slice of token `i`.
    pub fn token_time(&self, i: usize) -> usize {
        self.coords(i).0
    }
}

/// Fixed 3D periodic positional encoding: `d` split into three equal blocks,
/// each carrying the 1D sinusoidal encoding (base 10000) of the t, h, w
/// coordinate of the token.
pub fn positional_encoding(geom: &TokenGeometry, d: usize) -> Result<Array2<f64>> {
    if d % 6 != 0 {
        return Err(VidmaeError::Config(format!(
            "embedding dim {d} must be divisible by 6 for the 3-axis sin/cos encoding"
        )));
    }
    let block = d / 3;
    let half = block / 2;
    let n = geom.n_tokens();
    let mut pe = Array2::zeros((n, d));
    for i in 0..n {
        let (t, h, w) = geom.coords(i);
        for (axis, coord) in [(0usize, t as f64), (1, h as f64), (2, w as f64)] {
            for j in 0..half {
                let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / block as f64);
                pe[[i, axis * block + 2 * j]] = (coord * freq).sin();
                pe[[i, axis * block + 2 * j + 1]] = (coord * freq).cos();
            }
        }
    }
    Ok(pe)
}

/// Flatten the clip into its N x cube_len raw token matrix, time-major order.
/// Within a cube the layout is (pt, 3, ph, pw) row-major.
pub fn raw_cubes(clip: &Clip, geom: &TokenGeometry) -> Array2<f64> {
    let p = geom.patch;
    let mut out = Array2::zeros((geom.n_tokens(), p.cube_len()));
    for i in 0..geom.n_tokens() {
        let (t, h, w) = geom.coords(i);
        let mut col = 0;
        for dt in 0..p.pt {
            for c in 0..3 {
                for dy in 0..p.ph {
                    for dx in 0..p.pw {
                        out[[i, col]] =
                            clip.frames[[t * p.pt + dt, c, h * p.ph + dy, w * p.pw + dx]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Reassemble a clip from its raw cube matrix (inverse of [`raw_cubes`]).
pub fn cubes_to_frames(cubes: &Array2<f64>, geom: &TokenGeometry) -> ndarray::Array4<f64> {
    let p = geom.patch;
    let mut frames =
        ndarray::Array4::zeros((geom.nt * p.pt, 3, geom.nh * p.ph, geom.nw * p.pw));
    for i in 0..geom.n_tokens() {
        let (t, h, w) = geom.coords(i);
        let mut col = 0;
        for dt in 0..p.pt {
            for c in 0..3 {
                for dy in 0..p.ph {
                    for dx in 0..p.pw {
                        frames[[t * p.pt + dt, c, h * p.ph + dy, w * p.pw + dx]] =
                            cubes[[i, col]];
                        col += 1;
                    }
                }
            }
        }
    }
    frames
}

/// Per-token raw and standardized reconstruction targets.
#[derive(Debug, Clone)]
pub struct TokenTarget {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

pub fn make_targets(clip: &Clip, geom: &TokenGeometry) -> TokenTarget {
    let raw = raw_cubes(clip, geom);
    let mut normalized = raw.clone();
    for mut row in normalized.axis_iter_mut(ndarray::Axis(0)) {
        let mean = row.mean().unwrap();
        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        let denom = (var + TARGET_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    TokenTarget { raw, normalized }
}

/// The embedded token grid of one clip.
pub struct TokenGrid {
    pub geom: TokenGeometry,
    /// Tape node of the N x d embeddings (patch embedding + positional
    /// encoding), differentiable w.r.t. the embedding parameters.
    pub embeddings: Var,
    pub pos_enc: Array2<f64>,
}

/// Embed a clip: linear map of each flattened cube (named params
/// `embed.w`/`embed.b`) plus the fixed positional encoding.
pub fn tokenize(
    tape: &mut Tape,
    bindings: &mut Bindings,
    clip: &Clip,
    patch: PatchSize,
    d: usize,
) -> Result<TokenGrid> {
    let geom = TokenGeometry::for_clip(clip.len(), clip.height(), clip.width(), patch)?;
    let pos_enc = positional_encoding(&geom, d)?;
    let cubes = raw_cubes(clip, &geom);
    let x = tape.leaf(cubes);
    let emb = crate::nn::linear(tape, bindings, x, "embed");
    let embeddings = tape.add_const(emb, &pos_enc);
    tape.check_finite(embeddings, "token embeddings")?;
    Ok(TokenGrid {
        geom,
        embeddings,
        pos_enc,
    })
}
