//! Image/ground-truth collections and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, PNG images and ALRT truth
//! masks. Paths in the manifest are relative to the directory. Truth may also
//! be an 8-bit grayscale PNG whose values are class codes (255 = unlabeled).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alrt::{load_label_mask, save_label_mask};
use crate::error::{Error, Result};
use crate::raster::{LabelMask, Provenance, RasterImage, MAX_CLASSES, UNLABELED};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RasterImage,
    pub truth: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub truth: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 || c > MAX_CLASSES {
            return Err(Error::InvalidConfig(format!("{c} classes")));
        }
        let mut seen = std::collections::HashSet::new();
        for s in self.train.iter().chain(&self.test) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate image id {}", s.id)));
            }
            if s.id.contains('/') {
                return Err(Error::InvalidConfig(format!("image id {} contains '/'", s.id)));
            }
            if (s.image.height(), s.image.width()) != (s.truth.height(), s.truth.width()) {
                return Err(Error::DimensionMismatch(format!("image {} and its truth differ in size", s.id)));
            }
            s.truth.validate(c)?;
        }
        Ok(())
    }

    /// Pixel counts per class over the training truth.
    pub fn train_class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes()];
        for s in &self.train {
            for &l in s.truth.labels() {
                if l != UNLABELED {
                    counts[usize::from(l)] += 1;
                }
            }
        }
        counts
    }

    pub fn train_pixels(&self) -> u64 {
        self.train.iter().map(|s| s.truth.num_pixels() as u64).sum()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("truth"))?;
        let write = |samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
            samples
                .iter()
                .map(|s| {
                    let entry = ManifestEntry {
                        id: s.id.clone(),
                        image: format!("images/{}.png", s.id),
                        truth: format!("truth/{}.alrt", s.id),
                    };
                    s.image.write_png(dir.join(&entry.image))?;
                    save_label_mask(dir.join(&entry.truth), &s.truth)?;
                    Ok(entry)
                })
                .collect()
        };
        let manifest = Manifest {
            class_names: self.class_names.clone(),
            train: write(&self.train)?,
            test: write(&self.test)?,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let read = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
            entries
                .iter()
                .map(|e| {
                    Ok(Sample {
                        id: e.id.clone(),
                        image: RasterImage::read_png(dir.join(&e.image))?,
                        truth: load_truth(&dir.join(&e.truth))?,
                    })
                })
                .collect()
        };
        let ds = Self {
            class_names: manifest.class_names,
            train: read(&manifest.train)?,
            test: read(&manifest.test)?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn load_truth(path: &Path) -> Result<LabelMask> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = RasterImage::read_png(path)?;
        if img.channels() != 1 {
            return Err(Error::InvalidTensor(format!(
                "truth PNG {} must be single-channel",
                path.display()
            )));
        }
        let labels = img.data().to_vec();
        let prov = labels
            .iter()
            .map(|&l| if l == UNLABELED { Provenance::None } else { Provenance::Human })
            .collect();
        return LabelMask::from_parts(img.height(), img.width(), labels, prov);
    }
    load_label_mask(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let sample = |id: &str, v: u8| Sample {
            id: id.into(),
            image: RasterImage::filled(4, 5, 3, v).unwrap(),
            truth: LabelMask::from_labels(4, 5, vec![v % 2; 20], Provenance::Human).unwrap(),
        };
        Dataset {
            class_names: vec!["a".into(), "b".into()],
            train: vec![sample("x", 1), sample("y", 2)],
            test: vec![sample("z", 3)],
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        assert_eq!(ds.train_class_counts(), vec![20, 20]);
    }

    #[test]
    fn png_truth_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        RasterImage::new(4, 5, 1, vec![1; 20])
            .unwrap()
            .write_png(dir.path().join("truth/x.png"))
            .unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        std::fs::write(dir.path().join("manifest.json"), text.replace("truth/x.alrt", "truth/x.png")).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert!(loaded.train[0].truth.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut ds = tiny();
        ds.test[0].id = "x".into();
        assert!(ds.validate().is_err());
    }
}
