//! Choosing which units to send for labeling.
//!
//! Initial rounds have no trained model, so units are classified by an
//! [`EmbeddingProvider`] and picked evenly across predicted classes. Later
//! rounds score each unit by its predicted uncertainty, modulated by how
//! poorly the model currently does on the classes the unit appears to contain.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::sobel;
use crate::error::{Error, Result};
use crate::metrics::{argmax, entropy};
use crate::raster::{ProbabilityMap, RasterImage};
use crate::units::LabelingUnit;

pub const DEFAULT_PERF_FLOOR: f64 = 1e-3;

/// Per-class model quality measured on labeled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub raw_iou: Vec<f64>,
    /// Floored and rescaled to sum to one.
    pub normalized_perf: Vec<f64>,
    pub mean_perf: f64,
}

/// Floors each IoU at `eps` and rescales so the vector sums to one; the mean
/// is taken over the unfloored values.
pub fn normalize_perf(raw_iou: &[f64], eps: f64) -> ClassStats {
    let floored: Vec<f64> = raw_iou.iter().map(|&p| p.max(eps)).collect();
    let total: f64 = floored.iter().sum();
    let mean_perf = if raw_iou.is_empty() {
        0.0
    } else {
        raw_iou.iter().sum::<f64>() / raw_iou.len() as f64
    };
    ClassStats {
        raw_iou: raw_iou.to_vec(),
        normalized_perf: floored.into_iter().map(|p| p / total).collect(),
        mean_perf,
    }
}

impl ClassStats {
    pub fn from_raw(raw_iou: &[f64]) -> Self {
        normalize_perf(raw_iou, DEFAULT_PERF_FLOOR)
    }

    pub fn num_classes(&self) -> usize {
        self.raw_iou.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub unit_id: String,
    /// Region information, entropy scaled to the nominal region area.
    pub info: f64,
    /// Performance balance term.
    pub balance: f64,
    pub score: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores one unit against its image's probability map.
///
/// `region_area` is the nominal cell area (`region_size^2`); the unit's mean
/// pixel entropy is scaled by it so variable-size units compare fairly.
pub fn balanced_score(
    pm: &ProbabilityMap,
    unit: &LabelingUnit,
    stats: &ClassStats,
    region_area: f64,
) -> Result<UnitScore> {
    if unit.mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if stats.num_classes() != pm.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {} classes, probability map {}",
            stats.num_classes(),
            pm.num_classes()
        )));
    }
    let n = pm.num_pixels();
    let mut total_entropy = 0.0;
    let mut counts = vec![0usize; pm.num_classes()];
    for &p in &unit.mask {
        if p >= n {
            return Err(Error::OutOfBounds { index: p, len: n });
        }
        let dist = pm.pixel(p);
        total_entropy += entropy(dist);
        counts[argmax(dist)] += 1;
    }
    let size = unit.mask.len() as f64;
    let info = total_entropy / size * region_area;
    let balance: f64 = counts
        .iter()
        .zip(&stats.normalized_perf)
        .map(|(&k, &p)| (k as f64 / size) / p)
        .sum();
    Ok(UnitScore {
        unit_id: unit.id.clone(),
        info,
        balance,
        score: info * sigmoid(balance),
    })
}

/// Subtracts the pool mean of the balance term before the sigmoid.
pub fn center_balance(scores: &mut [UnitScore]) {
    if scores.is_empty() {
        return;
    }
    let mean = scores.iter().map(|s| s.balance).sum::<f64>() / scores.len() as f64;
    for s in scores {
        s.score = s.info * sigmoid(s.balance - mean);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Balanced,
    Entropy,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "balanced" => Ok(Self::Balanced),
            "entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Ranks candidates and takes the longest prefix whose total cost fits in
/// `budget_px`. Returns indices into `candidates`.
///
/// `scores[i]` must belong to `candidates[i]`; it is ignored by `Random`.
pub fn select_batch(
    candidates: &[LabelingUnit],
    scores: &[UnitScore],
    budget_px: u64,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<usize>> {
    if strategy != Strategy::Random && scores.len() != candidates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    match strategy {
        Strategy::Balanced => {
            order.sort_by(|&a, &b| scores[b].score.total_cmp(&scores[a].score).then(a.cmp(&b)))
        }
        // Info is mean entropy times a constant area, so it ranks by mean entropy.
        Strategy::Entropy => {
            order.sort_by(|&a, &b| scores[b].info.total_cmp(&scores[a].info).then(a.cmp(&b)))
        }
        Strategy::Random => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    Ok(take_within_budget(&order, |i| candidates[i].cost(), budget_px))
}

/// Greedy prefix: stops at the first unit that would overflow the budget.
pub fn take_within_budget(order: &[usize], cost: impl Fn(usize) -> u64, budget: u64) -> Vec<usize> {
    let mut spent = 0;
    let mut out = Vec::new();
    for &i in order {
        let c = cost(i);
        if spent + c > budget {
            break;
        }
        spent += c;
        out.push(i);
    }
    out
}

/// Seeded sample of `images_per_round` images; returns the indices of every
/// unit on those images.
pub fn sample_candidate_pool(
    units: &[LabelingUnit],
    images_per_round: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if units.is_empty() {
        return Err(Error::EmptyPool);
    }
    let images: Vec<&str> = units
        .iter()
        .map(|u| u.image_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<&str> = images
        .choose_multiple(&mut rng, images_per_round.min(images.len()))
        .copied()
        .collect();
    Ok(units
        .iter()
        .enumerate()
        .filter(|(_, u)| picked.contains(u.image_id.as_str()))
        .map(|(i, _)| i)
        .collect())
}

/// Predicted class of a region and the model's confidence in it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: usize,
    pub confidence: f64,
}

/// Zero-shot region classifier used to balance the initial selection.
pub trait EmbeddingProvider {
    fn classify(&self, unit: &LabelingUnit) -> Result<Classification>;
}

/// Per-class selection quota of `ceil(n / C)` highest-confidence units,
/// truncated to `n`; classes short of candidates are backfilled with the
/// most confident leftovers. Output is in selection order.
pub fn initial_select(
    units: &[LabelingUnit],
    provider: &dyn EmbeddingProvider,
    n: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if units.is_empty() {
        return Err(Error::EmptyPool);
    }
    let labels = units
        .iter()
        .map(|u| provider.classify(u))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = labels.iter().find(|c| c.class >= num_classes) {
        return Err(Error::InvalidTensor(format!(
            "provider returned class {} for {num_classes} classes",
            bad.class
        )));
    }
    Ok(balanced_pick(&labels, n, num_classes, seed))
}

/// Selection order for already-classified units; see [`initial_select`].
pub fn balanced_pick(
    labels: &[Classification],
    n: usize,
    num_classes: usize,
    seed: u64,
) -> Vec<usize> {
    let n = n.min(labels.len());
    // Seeded shuffle breaks confidence ties.
    let mut tiebreak: Vec<usize> = (0..labels.len()).collect();
    tiebreak.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank = vec![0; labels.len()];
    for (r, &i) in tiebreak.iter().enumerate() {
        rank[i] = r;
    }
    let by_conf = |a: &usize, b: &usize| {
        labels[*b]
            .confidence
            .total_cmp(&labels[*a].confidence)
            .then(rank[*a].cmp(&rank[*b]))
    };

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, l) in labels.iter().enumerate() {
        per_class[l.class].push(i);
    }
    for list in &mut per_class {
        list.sort_by(by_conf);
    }

    let quota = n.div_ceil(num_classes.max(1));
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; labels.len()];
    'rounds: for r in 0..quota {
        let mut round: Vec<usize> = per_class.iter().filter_map(|l| l.get(r).copied()).collect();
        round.sort_by(by_conf);
        for i in round {
            if chosen.len() == n {
                break 'rounds;
            }
            taken[i] = true;
            chosen.push(i);
        }
    }
    if chosen.len() < n {
        let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| !taken[i]).collect();
        rest.sort_by(by_conf);
        chosen.extend(rest.into_iter().take(n - chosen.len()));
    }
    chosen
}

/// Region descriptor: per-channel mean and standard deviation (samples scaled
/// to `[0, 1]`) followed by an 8-bin magnitude-weighted gradient-orientation
/// histogram, the whole vector l2-normalized.
pub fn region_features(img: &RasterImage, pixels: &[usize]) -> Vec<f64> {
    let ch = img.channels();
    let dim = 2 * ch + 8;
    if pixels.is_empty() {
        return vec![0.0; dim];
    }
    let w = img.width();
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in pixels {
        r0 = r0.min(p / w);
        r1 = r1.max(p / w);
        c0 = c0.min(p % w);
        c1 = c1.max(p % w);
    }
    let crop = img
        .crop(r0, c0, r1 - r0 + 1, c1 - c0 + 1)
        .expect("bounding box lies inside the image");
    let cw = crop.width();
    let local: Vec<usize> = pixels.iter().map(|&p| (p / w - r0) * cw + (p % w - c0)).collect();

    let mut feat = vec![0.0; dim];
    let n = local.len() as f64;
    for c in 0..ch {
        let vals = local.iter().map(|&p| f64::from(crop.data()[p * ch + c]) / 255.0);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        feat[c] = mean;
        feat[ch + c] = var.sqrt();
    }
    let luma: Vec<f64> = crop.luma().into_iter().map(|v| v / 255.0).collect();
    let (gx, gy) = sobel(&luma, crop.height(), cw);
    let hist = &mut feat[2 * ch..];
    let mut total = 0.0;
    for &p in &local {
        let mag = gx[p].hypot(gy[p]);
        if mag <= 1e-12 {
            continue;
        }
        let angle = gy[p].atan2(gx[p]).rem_euclid(std::f64::consts::TAU);
        let bin = ((angle / std::f64::consts::TAU * 8.0) as usize).min(7);
        hist[bin] += mag;
        total += mag;
    }
    if total > 0.0 {
        hist.iter_mut().for_each(|h| *h /= total);
    }
    l2_normalize(&mut feat);
    feat
}

fn l2_normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

pub const PROTOTYPE_TEMPERATURE: f64 = 0.1;

/// Nearest prototype by cosine similarity; confidence is the softmax weight
/// of the winner at temperature 0.1. A zero feature gets class 0 with
/// uniform confidence.
pub fn prototype_classify(feature: &[f64], prototypes: &[Vec<f64>]) -> Result<Classification> {
    if prototypes.is_empty() {
        return Err(Error::InvalidConfig("no prototypes".into()));
    }
    if let Some(p) = prototypes.iter().find(|p| p.len() != feature.len()) {
        return Err(Error::DimensionMismatch(format!(
            "prototype has {} dims, feature {}",
            p.len(),
            feature.len()
        )));
    }
    let c = prototypes.len();
    let mut f = feature.to_vec();
    if l2_normalize(&mut f) == 0.0 {
        return Ok(Classification {
            class: 0,
            confidence: 1.0 / c as f64,
        });
    }
    let sims: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                0.0
            } else {
                p.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() / norm
            }
        })
        .collect();
    let class = argmax(&sims);
    let max = sims[class];
    let z: f64 = sims
        .iter()
        .map(|s| ((s - max) / PROTOTYPE_TEMPERATURE).exp())
        .sum();
    Ok(Classification {
        class,
        confidence: 1.0 / z,
    })
}

/// Classifies unit pixels against per-class prototype features.
pub struct PrototypeProvider<'a> {
    pub prototypes: Vec<Vec<f64>>,
    pub images: &'a HashMap<String, RasterImage>,
}

impl<'a> PrototypeProvider<'a> {
    /// Prototypes are the features of one reference patch per class.
    pub fn from_patches(patches: &[RasterImage], images: &'a HashMap<String, RasterImage>) -> Self {
        let prototypes = patches
            .iter()
            .map(|p| region_features(p, &(0..p.height() * p.width()).collect::<Vec<_>>()))
            .collect();
        Self { prototypes, images }
    }
}

impl EmbeddingProvider for PrototypeProvider<'_> {
    fn classify(&self, unit: &LabelingUnit) -> Result<Classification> {
        let img = self
            .images
            .get(&unit.image_id)
            .ok_or_else(|| Error::UnknownUnit(format!("image {} of {}", unit.image_id, unit.id)))?;
        prototype_classify(&region_features(img, &unit.mask), &self.prototypes)
    }
}

/// Entry of an imported classification file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub unit_id: String,
    pub class: usize,
    pub confidence: f64,
}

/// Classifications produced elsewhere (for instance by a CLIP model) and
/// loaded from a JSON array of `{unit_id, class, confidence}`.
pub struct ScoreFileProvider {
    scores: HashMap<String, Classification>,
}

impl ScoreFileProvider {
    pub fn new(records: Vec<ScoreRecord>, num_classes: usize) -> Result<Self> {
        let mut scores = HashMap::new();
        for r in records {
            if r.class >= num_classes || !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::InvalidTensor(format!(
                    "score for {}: class {} confidence {}",
                    r.unit_id, r.class, r.confidence
                )));
            }
            scores.insert(
                r.unit_id,
                Classification {
                    class: r.class,
                    confidence: r.confidence,
                },
            );
        }
        Ok(Self { scores })
    }

    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let records: Vec<ScoreRecord> = serde_json::from_slice(&fs::read(path)?)?;
        Self::new(records, num_classes)
    }
}

impl EmbeddingProvider for ScoreFileProvider {
    fn classify(&self, unit: &LabelingUnit) -> Result<Classification> {
        self.scores
            .get(&unit.id)
            .copied()
            .ok_or_else(|| Error::UnknownUnit(unit.id.clone()))
    }
}
