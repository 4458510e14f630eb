//! Labeling units: rectangular grid cells and edge-guided components.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::edge::{edge_mask, EdgeConfig};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::rle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum UnitKind {
    Rect,
    Edge,
}

/// Smallest region an annotator labels wholly or not at all.
///
/// `mask` holds sorted, row-major flat pixel indices within the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelingUnit {
    pub id: String,
    pub image_id: String,
    pub kind: UnitKind,
    pub mask: Vec<usize>,
}

impl LabelingUnit {
    pub fn cost(&self) -> u64 {
        self.mask.len() as u64
    }

    /// Bounding box `(row, col, height, width)` for an image of width `width`.
    pub fn bbox(&self, width: usize) -> (usize, usize, usize, usize) {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &self.mask {
            let (r, c) = (p / width, p % width);
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        (r0, c0, r1 - r0 + 1, c1 - c0 + 1)
    }
}

/// JSON wire form: `{id, image_id, kind, rle_mask, cost}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: String,
    pub image_id: String,
    pub kind: UnitKind,
    pub rle_mask: Vec<u32>,
    pub cost: u64,
}

impl From<&LabelingUnit> for UnitRecord {
    fn from(u: &LabelingUnit) -> Self {
        Self {
            id: u.id.clone(),
            image_id: u.image_id.clone(),
            kind: u.kind,
            rle_mask: rle::encode_indices(&u.mask),
            cost: u.cost(),
        }
    }
}

impl TryFrom<UnitRecord> for LabelingUnit {
    type Error = Error;

    fn try_from(r: UnitRecord) -> Result<Self> {
        let mask = rle::decode_indices(&r.rle_mask);
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        if mask.len() as u64 != r.cost {
            return Err(Error::InvalidTensor(format!(
                "unit {} declares cost {} but its mask has {} pixels",
                r.id,
                r.cost,
                mask.len()
            )));
        }
        Ok(Self {
            id: r.id,
            image_id: r.image_id,
            kind: r.kind,
            mask,
        })
    }
}

/// Rectangle of a grid cell: `(row, col, height, width)`.
fn grid_cells(height: usize, width: usize, size: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut cells = Vec::new();
    for r in (0..height).step_by(size) {
        for c in (0..width).step_by(size) {
            cells.push((r, c, size.min(height - r), size.min(width - c)));
        }
    }
    cells
}

/// Non-overlapping `region_size` tiling; remainders on the right and bottom
/// become smaller cells.
pub fn grid_units(
    image_id: &str,
    height: usize,
    width: usize,
    region_size: usize,
) -> Result<Vec<LabelingUnit>> {
    if region_size < 8 {
        return Err(Error::InvalidConfig(format!(
            "region size must be at least 8, got {region_size}"
        )));
    }
    Ok(grid_cells(height, width, region_size)
        .into_iter()
        .enumerate()
        .map(|(k, (r, c, h, w))| LabelingUnit {
            id: format!("{image_id}/r{k}"),
            image_id: image_id.to_string(),
            kind: UnitKind::Rect,
            mask: (r..r + h)
                .flat_map(|i| (c..c + w).map(move |j| i * width + j))
                .collect(),
        })
        .collect())
}

/// 8-connected components of a binary mask, each as sorted flat indices.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (pi, pj) = ((p / width) as isize, (p % width) as isize);
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (ni, nj) = (pi + di, pj + dj);
                    if ni < 0 || nj < 0 || ni >= height as isize || nj >= width as isize {
                        continue;
                    }
                    let n = ni as usize * width + nj as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Disjoint cover of the image by EDGE units (connected components of the
/// dilated edge mask, oversized ones cut along grid lines) and the residual
/// RECT grid cells.
pub fn partition_units(
    image_id: &str,
    img: &RasterImage,
    cfg: &EdgeConfig,
    region_size: usize,
    budget_fraction: f64,
) -> Result<Vec<LabelingUnit>> {
    let edges = edge_mask(img, cfg, budget_fraction)?;
    partition_with_edges(image_id, img.height(), img.width(), &edges, cfg, region_size)
}

pub(crate) fn partition_with_edges(
    image_id: &str,
    height: usize,
    width: usize,
    edges: &[bool],
    cfg: &EdgeConfig,
    region_size: usize,
) -> Result<Vec<LabelingUnit>> {
    let mut units = Vec::new();
    // Cut side keeps every piece within max_unit_pixels.
    let cut = region_size
        .min((cfg.max_unit_pixels as f64).sqrt().floor() as usize)
        .max(1);
    let mut k = 0;
    for comp in connected_components(edges, height, width) {
        let pieces = if comp.len() > cfg.max_unit_pixels {
            let cols = width.div_ceil(cut);
            let mut by_cell: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for p in comp {
                let cell = (p / width / cut) * cols + (p % width) / cut;
                by_cell.entry(cell).or_default().push(p);
            }
            by_cell.into_values().collect()
        } else {
            vec![comp]
        };
        for mask in pieces {
            units.push(LabelingUnit {
                id: format!("{image_id}/e{k}"),
                image_id: image_id.to_string(),
                kind: UnitKind::Edge,
                mask,
            });
            k += 1;
        }
    }
    for mut cell in grid_units(image_id, height, width, region_size)? {
        cell.mask.retain(|&p| !edges[p]);
        if !cell.mask.is_empty() {
            units.push(cell);
        }
    }
    Ok(units)
}
