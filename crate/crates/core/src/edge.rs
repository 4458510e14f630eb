//! Edge masks: Gaussian smoothing, Canny detection and square dilation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Edge detection settings. Defaults follow the 800x800 / 80px-region setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub gaussian_kernel: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub dilation_kernel: usize,
    /// Amount the high threshold drops per 5% of labeled budget.
    pub high_decrement: f64,
    pub max_unit_pixels: usize,
    /// Budget fraction at which the schedule starts counting (the initial allocation).
    pub schedule_start: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            gaussian_kernel: 17,
            canny_low: 10.0,
            canny_high: 80.0,
            dilation_kernel: 9,
            high_decrement: 5.0,
            max_unit_pixels: 6400,
            schedule_start: 0.05,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canny_low >= self.canny_high {
            return Err(Error::InvalidConfig(format!(
                "canny_low {} must be below canny_high {}",
                self.canny_low, self.canny_high
            )));
        }
        for (name, k) in [
            ("gaussian_kernel", self.gaussian_kernel),
            ("dilation_kernel", self.dilation_kernel),
        ] {
            if k < 3 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be odd and >= 3, got {k}"
                )));
            }
        }
        if self.max_unit_pixels == 0 {
            return Err(Error::InvalidConfig("max_unit_pixels must be positive".into()));
        }
        Ok(())
    }
}

const STEP: f64 = 0.05;

/// High Canny threshold for the current labeled-budget fraction: one
/// decrement per full 5% step beyond `schedule_start`, never below `low + 1`.
pub fn schedule_high_threshold(cfg: &EdgeConfig, budget_fraction: f64) -> f64 {
    // The epsilon keeps exact multiples such as 0.20 from flooring one step short.
    let steps = ((budget_fraction - cfg.schedule_start) / STEP + 1e-9)
        .floor()
        .max(0.0);
    (cfg.canny_high - cfg.high_decrement * steps).max(cfg.canny_low + 1.0)
}

/// Standard deviation used for a `k x k` Gaussian when none is given.
pub fn sigma_for_kernel(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_weights(k: usize) -> Vec<f64> {
    let sigma = sigma_for_kernel(k);
    let r = (k / 2) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[inline]
fn clamp(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Separable convolution with replicated borders.
fn convolve_separable(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| k * src[i * w + clamp(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| k * tmp[clamp(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(src: &[f64], h: usize, w: usize, kernel_size: usize) -> Vec<f64> {
    convolve_separable(src, h, w, &gaussian_weights(kernel_size))
}

/// 3x3 Sobel derivatives `(gx, gy)` with replicated borders.
pub fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let at = |i: isize, j: isize| src[clamp(i, h) * w + clamp(j, w)];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            gx[idx] = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            gy[idx] = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
        }
    }
    (gx, gy)
}

/// Canny on an already-smoothed intensity plane. Returns a thin edge map.
pub fn canny(smoothed: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let (gx, gy) = sobel(smoothed, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag[i as usize * w + j as usize]
        }
    };

    // Non-maximum suppression, gradient direction quantized to 4 sectors.
    let mut thin = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            let m = mag[idx];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[idx].atan2(gx[idx]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Rows grow downwards, so a positive gy points to row i + 1.
            let (a, b) = if !(22.5..157.5).contains(&angle) {
                (at(i, j - 1), at(i, j + 1))
            } else if angle < 67.5 {
                (at(i - 1, j - 1), at(i + 1, j + 1))
            } else if angle < 112.5 {
                (at(i - 1, j), at(i + 1, j))
            } else {
                (at(i - 1, j + 1), at(i + 1, j - 1))
            };
            if m >= a && m >= b {
                thin[idx] = m;
            }
        }
    }

    // Hysteresis: grow from strong pixels through 8-connected weak ones.
    let mut edges = vec![false; h * w];
    let mut queue = VecDeque::new();
    for (idx, &m) in thin.iter().enumerate() {
        if m >= high && !edges[idx] {
            edges[idx] = true;
            queue.push_back(idx);
            while let Some(p) = queue.pop_front() {
                let (pi, pj) = ((p / w) as isize, (p % w) as isize);
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (ni, nj) = (pi + di, pj + dj);
                        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        let n = ni as usize * w + nj as usize;
                        if !edges[n] && thin[n] >= low {
                            edges[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
    }
    edges
}

/// Binary dilation with a `k x k` square structuring element.
pub fn dilate(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = (k / 2) as isize;
    let mut tmp = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = (-r..=r).any(|d| {
                let jj = j as isize + d;
                jj >= 0 && (jj as usize) < w && mask[i * w + jj as usize]
            });
        }
    }
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (-r..=r).any(|d| {
                let ii = i as isize + d;
                ii >= 0 && (ii as usize) < h && tmp[ii as usize * w + j]
            });
        }
    }
    out
}

/// Edge regions of an image: smooth, Canny with the scheduled high
/// threshold, then dilate.
pub fn edge_mask(img: &RasterImage, cfg: &EdgeConfig, budget_fraction: f64) -> Result<Vec<bool>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&budget_fraction) {
        return Err(Error::InvalidConfig(format!(
            "budget fraction {budget_fraction} outside [0, 1]"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h.min(w) < cfg.gaussian_kernel {
        return Err(Error::DegenerateImage {
            height: h,
            width: w,
            kernel: cfg.gaussian_kernel,
        });
    }
    let high = schedule_high_threshold(cfg, budget_fraction);
    Ok(edge_mask_with_threshold(&img.luma(), h, w, cfg, high))
}

pub(crate) fn edge_mask_with_threshold(
    luma: &[f64],
    h: usize,
    w: usize,
    cfg: &EdgeConfig,
    high: f64,
) -> Vec<bool> {
    let smoothed = gaussian_blur(luma, h, w, cfg.gaussian_kernel);
    let edges = canny(&smoothed, h, w, cfg.canny_low, high);
    dilate(&edges, h, w, cfg.dilation_kernel)
}
