//! Raster containers: per-pixel class probabilities, label masks with
//! provenance, and 8-bit images.
//!
//! All containers are row-major. Pixel `(i, j)` (row `i`, column `j`) lives at
//! flat index `i * width + j`; pixel sets are expressed as flat indices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel label code for pixels without a decided class.
pub const UNLABELED: u8 = 255;

/// Largest supported class count (codes `0..=253`, 254 classes; 255 is the sentinel).
pub const MAX_CLASSES: usize = 254;

const SUM_TOLERANCE: f64 = 1e-9;

/// Per-pixel class probabilities, `height x width x num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got {height}x{width}x{num_classes}"
            )));
        }
        if num_classes > MAX_CLASSES {
            return Err(Error::InvalidTensor(format!(
                "{num_classes} classes exceeds the maximum of {MAX_CLASSES}"
            )));
        }
        let expected = height * width * num_classes;
        if data.len() != expected {
            return Err(Error::InvalidTensor(format!(
                "expected {expected} values, got {}",
                data.len()
            )));
        }
        for (pixel, row) in data.chunks_exact(num_classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidTensor(format!(
                    "pixel {pixel} has a probability outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidTensor(format!(
                    "pixel {pixel} probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    /// Every pixel gets the same distribution.
    pub fn uniform(height: usize, width: usize, num_classes: usize) -> Result<Self> {
        let p = 1.0 / num_classes as f64;
        Self::new(height, width, num_classes, vec![p; height * width * num_classes])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Class distribution of the pixel at flat index `index`.
    pub fn pixel(&self, index: usize) -> &[f64] {
        let c = self.num_classes;
        &self.data[index * c..(index + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize, class: usize) -> f64 {
        self.data[(row * self.width + col) * self.num_classes + class]
    }
}

/// Origin of a decided label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Provenance {
    None = 0,
    Human = 1,
    Pseudo = 2,
}

impl Provenance {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::None),
            1 => Some(Self::Human),
            2 => Some(Self::Pseudo),
            _ => None,
        }
    }
}

/// Per-pixel class codes with provenance.
///
/// A pixel is *decided* when its code is not [`UNLABELED`]; decided pixels
/// always carry `Human` or `Pseudo` provenance, except for masks produced by
/// [`crate::metrics::argmax_map`] which are plain predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl LabelMask {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![UNLABELED; height * width],
            provenance: vec![Provenance::None; height * width],
        }
    }

    /// Builds a mask whose decided pixels all carry `provenance`.
    pub fn from_labels(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidTensor(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let provenance = labels
            .iter()
            .map(|&l| if l == UNLABELED { Provenance::None } else { provenance })
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            provenance,
        })
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if labels.len() != height * width || provenance.len() != labels.len() {
            return Err(Error::InvalidTensor(format!(
                "label/provenance planes do not match {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            provenance,
        })
    }

    /// Checks the provenance invariant and that codes are `< num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, (&l, &p)) in self.labels.iter().zip(&self.provenance).enumerate() {
            if l != UNLABELED && usize::from(l) >= num_classes {
                return Err(Error::InvalidTensor(format!(
                    "pixel {i} has class {l} but there are {num_classes} classes"
                )));
            }
            if l != UNLABELED && p == Provenance::None {
                return Err(Error::InvalidTensor(format!(
                    "pixel {i} is decided but has no provenance"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn provenance_at(&self, index: usize) -> Provenance {
        self.provenance[index]
    }

    pub fn is_decided(&self, index: usize) -> bool {
        self.labels[index] != UNLABELED
    }

    pub fn set(&mut self, index: usize, label: u8, provenance: Provenance) {
        self.labels[index] = label;
        self.provenance[index] = if label == UNLABELED {
            Provenance::None
        } else {
            provenance
        };
    }

    /// Clears every pixel with the given provenance.
    pub fn clear_provenance(&mut self, provenance: Provenance) {
        for (l, p) in self.labels.iter_mut().zip(self.provenance.iter_mut()) {
            if *p == provenance {
                *l = UNLABELED;
                *p = Provenance::None;
            }
        }
    }

    pub fn count_with(&self, provenance: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == provenance).count()
    }
}

/// 8-bit raster image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidTensor(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidTensor("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidTensor(format!(
                "expected {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn sample(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Luma in `[0, 255]`; RGB uses the Rec. 601 weights.
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| f64::from(v)).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|px| {
                    0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2])
                })
                .collect(),
        }
    }

    /// Copies the rectangle starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = (r * self.width + col) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Self::new(height, width, self.channels, data)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        match img.color() {
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 => {
                Self::new(height, width, 1, img.into_luma8().into_raw())
            }
            _ => Self::new(height, width, 3, img.into_rgb8().into_raw()),
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Encodes the image as PNG bytes.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }
}
