//! Synthetic imbalanced land-cover mosaics with known ground truth.
//!
//! Each image is a Voronoi mosaic; "blob" classes are painted first as
//! star-shaped polygons and the remaining pixels are split into Voronoi
//! cells. Classes are handed out by running deficit against the target area
//! proportions, so the aggregate over all generated images tracks the
//! targets closely.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::raster::{LabelMask, Provenance, RasterImage, MAX_CLASSES, UNLABELED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Fills whole Voronoi cells.
    Mosaic,
    /// Star-shaped polygons laid over the mosaic.
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub color: [u8; 3],
    /// Per-channel Gaussian noise standard deviation.
    pub noise: f64,
    pub shape: ShapeFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: Vec<ClassStyle>,
    /// Target area fraction per class; must sum to 1.
    pub proportions: Vec<f64>,
    pub train_images: usize,
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    /// Voronoi seeds per image.
    pub cells: usize,
    /// Standard deviation of a per-image brightness offset.
    pub brightness_jitter: f64,
}

fn style(name: &str, color: [u8; 3], noise: f64, shape: ShapeFamily) -> ClassStyle {
    ClassStyle {
        name: name.into(),
        color,
        noise,
        shape,
    }
}

/// Scales published percentages (which need not sum to exactly 100) to
/// fractions summing to 1.
pub fn normalized(shares: &[f64]) -> Vec<f64> {
    let sum: f64 = shares.iter().sum();
    shares.iter().map(|s| s / sum).collect()
}

impl Default for SynthSpec {
    /// Six land-cover classes with the area shares of a typical satellite
    /// land-cover benchmark: one dominant class near 58% and a rarest near 4%.
    fn default() -> Self {
        use ShapeFamily::*;
        Self {
            classes: vec![
                style("urban", [150, 150, 158], 26.0, Blob),
                style("agriculture", [196, 172, 88], 10.0, Mosaic),
                style("rangeland", [150, 168, 96], 16.0, Mosaic),
                style("forest", [42, 96, 44], 12.0, Mosaic),
                style("water", [36, 64, 150], 6.0, Blob),
                style("barren", [214, 190, 160], 10.0, Mosaic),
            ],
            proportions: normalized(&[9.3, 57.7, 10.2, 13.8, 3.7, 6.1]),
            train_images: 24,
            test_images: 8,
            height: 64,
            width: 64,
            cells: 10,
            brightness_jitter: 6.0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c == 0 || c > MAX_CLASSES {
            return Err(Error::InvalidConfig(format!("{c} classes")));
        }
        if self.proportions.len() != c {
            return Err(Error::InfeasibleProportions(format!(
                "{} proportions for {c} classes",
                self.proportions.len()
            )));
        }
        if self.proportions.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InfeasibleProportions("proportions must lie in [0, 1]".into()));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InfeasibleProportions(format!("proportions sum to {sum}")));
        }
        if !self.classes.iter().any(|s| s.shape == ShapeFamily::Mosaic) {
            return Err(Error::InfeasibleProportions("at least one class must fill the mosaic".into()));
        }
        if self.height < 8 || self.width < 8 || self.cells == 0 {
            return Err(Error::InvalidConfig(format!(
                "images must be at least 8x8 with one cell, got {}x{} with {} cells",
                self.height, self.width, self.cells
            )));
        }
        if self.train_images == 0 {
            return Err(Error::InvalidConfig("no training images".into()));
        }
        Ok(())
    }
}

/// Tracks assigned area against the targets.
struct Ledger<'a> {
    targets: &'a [f64],
    assigned: Vec<f64>,
    total: f64,
}

impl Ledger<'_> {
    fn deficit(&self, c: usize) -> f64 {
        self.targets[c] * self.total - self.assigned[c]
    }
}

/// Generates the train and test splits. Identical output for identical
/// `seed` and `spec`.
pub fn synth_dataset(seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ledger = Ledger {
        targets: &spec.proportions,
        assigned: vec![0.0; spec.num_classes()],
        total: 0.0,
    };
    let mut make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sample>> {
        (0..n)
            .map(|k| {
                let labels = mosaic_labels(spec, &mut ledger, rng);
                let image = render(spec, &labels, rng)?;
                let truth = LabelMask::from_labels(spec.height, spec.width, labels, Provenance::Human)?;
                Ok(Sample {
                    id: format!("{prefix}{k:04}"),
                    image,
                    truth,
                })
            })
            .collect()
    };
    let train = make("train", spec.train_images, &mut rng)?;
    let test = make("test", spec.test_images, &mut rng)?;
    Ok(Dataset {
        class_names: spec.classes.iter().map(|s| s.name.clone()).collect(),
        train,
        test,
    })
}

fn mosaic_labels(spec: &SynthSpec, ledger: &mut Ledger, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let area = (h * w) as f64;
    ledger.total += area;
    let mut labels = vec![UNLABELED; h * w];

    for (c, s) in spec.classes.iter().enumerate() {
        if s.shape != ShapeFamily::Blob {
            continue;
        }
        let mut want = ledger.deficit(c).min(0.5 * area);
        while want >= 0.01 * area {
            let painted = paint_blob(&mut labels, h, w, c as u8, want, rng);
            ledger.assigned[c] += painted as f64;
            if painted == 0 {
                break;
            }
            want -= painted as f64;
        }
    }

    let seeds: Vec<(f64, f64)> = (0..spec.cells)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); seeds.len()];
    for i in 0..h {
        for j in 0..w {
            if labels[i * w + j] != UNLABELED {
                continue;
            }
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let nearest = (0..seeds.len())
                .min_by(|&a, &b| {
                    let da = (seeds[a].0 - y).powi(2) + (seeds[a].1 - x).powi(2);
                    let db = (seeds[b].0 - y).powi(2) + (seeds[b].1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            cells[nearest].push(i * w + j);
        }
    }
    cells.shuffle(rng);
    let mosaic: Vec<usize> = (0..spec.num_classes())
        .filter(|&c| spec.classes[c].shape == ShapeFamily::Mosaic)
        .collect();
    for cell in cells.into_iter().filter(|c| !c.is_empty()) {
        let weights: Vec<f64> = mosaic.iter().map(|&c| ledger.deficit(c).max(0.0)).collect();
        let sum: f64 = weights.iter().sum();
        let class = if sum > 0.0 {
            let mut r = rng.random_range(0.0..sum);
            let mut pick = mosaic[mosaic.len() - 1];
            for (&c, &wt) in mosaic.iter().zip(&weights) {
                if r < wt {
                    pick = c;
                    break;
                }
                r -= wt;
            }
            pick
        } else {
            *mosaic
                .iter()
                .max_by(|&&a, &&b| ledger.deficit(a).total_cmp(&ledger.deficit(b)))
                .unwrap_or(&mosaic[0])
        };
        ledger.assigned[class] += cell.len() as f64;
        for p in cell {
            labels[p] = class as u8;
        }
    }
    labels
}

/// Paints a star-shaped polygon of roughly `target` pixels over pixels not
/// yet claimed by another blob. Returns the number of pixels painted.
fn paint_blob(labels: &mut [u8], h: usize, w: usize, class: u8, target: f64, rng: &mut ChaCha8Rng) -> usize {
    let max_r = (h.min(w) as f64) / 2.5;
    let r = (target / (0.8 * std::f64::consts::PI)).sqrt().clamp(2.0, max_r);
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let poly = star_polygon(cy, cx, r, 9, rng);
    let mut painted = 0;
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            if labels[idx] == UNLABELED && point_in_polygon(i as f64 + 0.5, j as f64 + 0.5, &poly) {
                labels[idx] = class;
                painted += 1;
                if painted as f64 >= target {
                    return painted;
                }
            }
        }
    }
    painted
}

fn star_polygon(cy: f64, cx: f64, r: f64, vertices: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let step = std::f64::consts::TAU / vertices as f64;
    let phase = rng.random_range(0.0..step);
    (0..vertices)
        .map(|k| {
            let a = phase + step * k as f64 + rng.random_range(-0.3..0.3) * step;
            let rr = r * rng.random_range(0.7..1.15);
            (cy + rr * a.sin(), cx + rr * a.cos())
        })
        .collect()
}

/// Even-odd rule.
pub fn point_in_polygon(y: f64, x: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (y1, x1) = poly[k];
        let (y2, x2) = poly[(k + 1) % n];
        if (y1 > y) != (y2 > y) {
            let xc = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < xc {
                inside = !inside;
            }
        }
    }
    inside
}

fn render(spec: &SynthSpec, labels: &[u8], rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let shift = if spec.brightness_jitter > 0.0 {
        Normal::new(0.0, spec.brightness_jitter)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng)
    } else {
        0.0
    };
    let noises: Vec<Normal<f64>> = spec
        .classes
        .iter()
        .map(|s| Normal::new(0.0, s.noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let s = &spec.classes[usize::from(l)];
        for ch in 0..3 {
            let v = f64::from(s.color[ch]) + shift + noises[usize::from(l)].sample(rng);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(spec.height, spec.width, 3, data)
}

/// One square patch per class rendered with that class's style, for
/// prototype matching.
pub fn class_patches(spec: &SynthSpec, size: usize, seed: u64) -> Result<Vec<RasterImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_spec = SynthSpec {
        height: size,
        width: size,
        brightness_jitter: 0.0,
        ..spec.clone()
    };
    (0..spec.num_classes())
        .map(|c| render(&patch_spec, &vec![c as u8; size * size], &mut rng))
        .collect()
}

/// A scene of a few well-separated polygons on a background, for checking
/// how edge units follow class boundaries. Classes: 0 background, 1 and 2
/// polygons, with grey levels 105 apart so every class pair has the same
/// contrast.
pub fn polygon_scene(seed: u64, size: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; size * size];
    let s = size as f64;
    for k in 0..3 {
        let class = 1 + (k % 2) as u8;
        let r = rng.random_range(0.12 * s..0.2 * s);
        let cy = rng.random_range(r..s - r);
        let cx = rng.random_range(r..s - r);
        let poly = star_polygon(cy, cx, r, 7, &mut rng);
        for i in 0..size {
            for j in 0..size {
                if point_in_polygon(i as f64 + 0.5, j as f64 + 0.5, &poly) {
                    labels[i * size + j] = class;
                }
            }
        }
    }
    let spec = SynthSpec {
        classes: vec![
            style("ground", [30, 30, 30], 4.0, ShapeFamily::Mosaic),
            style("roof", [135, 135, 135], 4.0, ShapeFamily::Blob),
            style("field", [240, 240, 240], 4.0, ShapeFamily::Blob),
        ],
        proportions: vec![1.0, 0.0, 0.0],
        height: size,
        width: size,
        brightness_jitter: 0.0,
        ..SynthSpec::default()
    };
    let image = render(&spec, &labels, &mut rng)?;
    Ok(Sample {
        id: format!("scene{seed}"),
        image,
        truth: LabelMask::from_labels(size, size, labels, Provenance::Human)?,
    })
}

/// Pixels with a 4-neighbor of a different class.
pub fn boundary_pixels(truth: &LabelMask) -> Vec<usize> {
    let (h, w) = (truth.height(), truth.width());
    let l = truth.labels();
    (0..h * w)
        .filter(|&p| {
            let (i, j) = (p / w, p % w);
            (i > 0 && l[p - w] != l[p])
                || (i + 1 < h && l[p + w] != l[p])
                || (j > 0 && l[p - 1] != l[p])
                || (j + 1 < w && l[p + 1] != l[p])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            train_images: 3,
            test_images: 1,
            ..SynthSpec::default()
        };
        assert_eq!(synth_dataset(5, &spec).unwrap(), synth_dataset(5, &spec).unwrap());
        assert_ne!(synth_dataset(5, &spec).unwrap(), synth_dataset(6, &spec).unwrap());
    }

    #[test]
    fn default_proportions_are_tracked() {
        let spec = SynthSpec::default();
        let ds = synth_dataset(1, &spec).unwrap();
        let mut counts = [0u64; 6];
        for s in ds.train.iter().chain(&ds.test) {
            assert!(s.truth.labels().iter().all(|&l| l < 6));
            for &l in s.truth.labels() {
                counts[usize::from(l)] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        for (c, &n) in counts.iter().enumerate() {
            let share = n as f64 / total as f64;
            assert!((share - spec.proportions[c]).abs() < 0.03, "class {c}: {share}");
        }
    }

    #[test]
    fn proportions_must_sum_to_one() {
        let spec = SynthSpec {
            proportions: vec![0.5, 0.5, 0.1, 0.0, 0.0, 0.0],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_dataset(0, &spec), Err(Error::InfeasibleProportions(_))));
    }

    #[test]
    fn polygon_test() {
        let square = [(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)];
        assert!(point_in_polygon(1.0, 1.0, &square));
        assert!(!point_in_polygon(3.0, 1.0, &square));
    }

    #[test]
    fn boundary_of_half_plane() {
        let labels: Vec<u8> = (0..16).map(|p| u8::from(p % 4 >= 2)).collect();
        let lm = LabelMask::from_labels(4, 4, labels, Provenance::Human).unwrap();
        let b = boundary_pixels(&lm);
        assert_eq!(b, vec![1, 2, 5, 6, 9, 10, 13, 14]);
    }
}
