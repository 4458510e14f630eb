//! Handcrafted per-pixel features.

use crate::edge::sobel;
use crate::raster::RasterImage;

/// Window side for the local statistics.
pub const WINDOW: usize = 5;

/// Per-pixel feature vectors, row-major, `dim` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Feature width for an image with `channels` channels.
pub fn feature_dim(channels: usize) -> usize {
    3 * channels + 1
}

/// Layout per pixel: raw channels, then the 5x5 window mean of each channel,
/// then the window standard deviation of each channel, then the Sobel
/// gradient magnitude of luma. With samples scaled to `[0, 1]`, channels and
/// means are mapped to `[-1, 1]`, deviations multiplied by 4 and the gradient
/// divided by 4, so every feature spans roughly unit range. Borders
/// replicate the edge pixels.
pub fn extract_features(img: &RasterImage) -> FeatureMap {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let dim = feature_dim(ch);
    let r = (WINDOW / 2) as isize;
    let sample = |i: isize, j: isize, c: usize| -> f64 {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        f64::from(img.data()[(i * w + j) * ch + c]) / 255.0
    };
    let luma: Vec<f64> = img.luma().into_iter().map(|v| v / 255.0).collect();
    let (gx, gy) = sobel(&luma, h, w);
    let n = (WINDOW * WINDOW) as f64;

    let mut data = vec![0.0; h * w * dim];
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let out = &mut data[idx * dim..(idx + 1) * dim];
            for c in 0..ch {
                out[c] = 2.0 * sample(i as isize, j as isize, c) - 1.0;
                let (mut s, mut s2) = (0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let v = sample(i as isize + di, j as isize + dj, c);
                        s += v;
                        s2 += v * v;
                    }
                }
                let mean = s / n;
                out[ch + c] = 2.0 * mean - 1.0;
                out[2 * ch + c] = 4.0 * (s2 / n - mean * mean).max(0.0).sqrt();
            }
            out[3 * ch] = gx[idx].hypot(gy[idx]) / 4.0;
        }
    }
    FeatureMap {
        height: h,
        width: w,
        dim,
        data,
    }
}
