//! Small image utilities shared by the synthetic generator, the clip
//! pipeline, and the saliency provider.

use ndarray::Array2;

/// Separable Gaussian blur with a 2*ceil(3*sigma)+1 kernel.
pub fn gaussian_smooth(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= s;
    }
    let (h, w) = img.dim();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + ki as i64 - radius, w);
                acc += k * img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + ki as i64 - radius, h);
                acc += k * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Bilinear resize; bit-equal copy when the target equals the source size.
pub fn bilinear_resize(img: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (th, tw) {
        return img.clone();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Array2::zeros((th, tw));
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = img[[y0, x0]] * (1.0 - dx) + img[[y0, x1]] * dx;
            let bot = img[[y1, x0]] * (1.0 - dx) + img[[y1, x1]] * dx;
            out[[y, x]] = (top * (1.0 - dy) + bot * dy).clamp(0.0, 1.0);
        }
    }
    out
}

/// Local variance over a (2r+1)^2 window, computed from running sums.
pub fn local_variance(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = radius as i64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y + dy;
                    let xx = x + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        let v = img[[yy as usize, xx as usize]];
                        sum += v;
                        sq += v * v;
                        n += 1.0;
                    }
                }
            }
            let mean = sum / n;
            out[[y as usize, x as usize]] = (sq / n - mean * mean).max(0.0);
        }
    }
    out
}
