use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::acquisition::{
    balanced_pick, balanced_score, center_balance, normalize_perf, sample_candidate_pool, select_batch,
    Classification, EmbeddingProvider, PrototypeProvider, ScoreFileProvider, Strategy,
};
use crate::dataset::{Dataset, Sample};
use crate::edge::schedule_high_threshold;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, Toggles};
use crate::harness::labeler::{LabelOutcome, Labeler};
use crate::harness::log::{LogRecord, RunLog};
use crate::metrics::{argmax_map, ConfusionMatrix, MetricReport};
use crate::model::{extract_features, fit, predict, FeatureMap, ModelParams, PixelSet};
use crate::pseudo::{generate_pseudo_global, generate_pseudo_pool, pseudo_counts, pseudo_quota, ratio_thresholds};
use crate::raster::{LabelMask, ProbabilityMap, Provenance, RasterImage};
use crate::synth::class_patches;
use crate::units::{grid_units, partition_units, LabelingUnit};

/// Stream tags for [`derive_seed`].
const TAG_PARAMS: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_POOL: u64 = 4;
const TAG_SELECT: u64 = 5;
const TAG_PATCHES: u64 = 6;

/// Independent sub-seed for one stage of one iteration (SplitMix64 mixing).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loop state between iterations.
#[derive(Debug, Clone)]
pub struct RunState {
    pub iteration: usize,
    pub labeled_pixels: u64,
    pub total_pixels: u64,
    /// Per training image: HUMAN labels plus the current PSEUDO labels.
    pub labels: Vec<LabelMask>,
    /// Labeled unit ids in labeling order.
    pub labeled_units: Vec<String>,
    pub skipped_units: Vec<String>,
    /// Per training image: pixels of labeled or skipped units. They never
    /// return to the pool.
    pub claimed: Vec<Vec<bool>>,
    pub unlabeled: Vec<LabelingUnit>,
    pub params: ModelParams,
    /// Global epoch count, drives the learning-rate schedule.
    pub epoch: usize,
    /// Per-class IoU of the current model on HUMAN training pixels.
    pub raw_iou: Option<Vec<f64>>,
    /// Test-split report per iteration.
    pub history: Vec<MetricReport>,
    /// Canny high threshold the current units were cut with.
    pub partition_high: f64,
    pub generation: usize,
}

impl RunState {
    pub fn budget_fraction(&self) -> f64 {
        self.labeled_pixels as f64 / self.total_pixels as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub state: RunState,
}

/// Full-image inference on `samples`, scored against their truth.
pub fn eval_checkpoint(params: &ModelParams, samples: &[Sample], num_classes: usize) -> Result<MetricReport> {
    let features: Vec<FeatureMap> = samples.par_iter().map(|s| extract_features(&s.image)).collect();
    eval_features(params, samples, &features, num_classes)
}

fn eval_features(
    params: &ModelParams,
    samples: &[Sample],
    features: &[FeatureMap],
    num_classes: usize,
) -> Result<MetricReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (s, fm) in samples.iter().zip(features) {
        let pred = argmax_map(&predict(params, fm)?);
        cm.add(&pred, &s.truth)?;
    }
    Ok(cm.report())
}

/// Per-class IoU of `pms` against the HUMAN pixels of `labels`.
pub fn labeled_iou(pms: &[ProbabilityMap], labels: &[LabelMask], num_classes: usize) -> Result<Vec<f64>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (pm, lm) in pms.iter().zip(labels) {
        cm.add_where(&argmax_map(pm), lm, |i| lm.provenance_at(i) == Provenance::Human)?;
    }
    Ok(cm.report().per_class_iou)
}

struct Context<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    toggles: Toggles,
    seed: u64,
    num_classes: usize,
    train_features: Vec<FeatureMap>,
    test_features: Vec<FeatureMap>,
    image_index: HashMap<&'a str, usize>,
    region_area: f64,
    started: Instant,
}

/// Runs the active-learning loop to the total budget.
///
/// Identical config, data, seed and labeler answers give an identical log.
pub fn run_loop(cfg: &RunConfig, data: &Dataset, seed: u64, labeler: &mut dyn Labeler) -> Result<RunOutcome> {
    cfg.validate()?;
    data.validate()?;
    let started = Instant::now();
    let ctx = Context {
        cfg,
        data,
        toggles: cfg.toggles(),
        seed,
        num_classes: data.num_classes(),
        train_features: data.train.par_iter().map(|s| extract_features(&s.image)).collect(),
        test_features: data.test.par_iter().map(|s| extract_features(&s.image)).collect(),
        image_index: data.train.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect(),
        region_area: (cfg.region_size * cfg.region_size) as f64,
        started,
    };
    let d_feat = ctx.train_features[0].dim;
    let total_pixels = data.train_pixels();
    let mut state = RunState {
        iteration: 0,
        labeled_pixels: 0,
        total_pixels,
        labels: data
            .train
            .iter()
            .map(|s| LabelMask::unlabeled(s.image.height(), s.image.width()))
            .collect(),
        labeled_units: Vec::new(),
        skipped_units: Vec::new(),
        claimed: data.train.iter().map(|s| vec![false; s.truth.num_pixels()]).collect(),
        unlabeled: Vec::new(),
        params: ModelParams::init(d_feat, cfg.embed_dim, ctx.num_classes, derive_seed(seed, TAG_PARAMS, 0)),
        epoch: 0,
        raw_iou: None,
        history: Vec::new(),
        partition_high: schedule_high_threshold(&cfg.edge, 0.0),
        generation: 0,
    };
    state.unlabeled = partition_all(&ctx, &state, 0.0, 0)?;

    let total_budget = (cfg.total_budget_fraction * total_pixels as f64).floor() as u64;
    let initial_budget = (cfg.initial_fraction * total_pixels as f64).floor() as u64;
    let min_cost = state.unlabeled.iter().map(LabelingUnit::cost).min().unwrap_or(0);
    if initial_budget < min_cost || state.unlabeled.is_empty() {
        return Err(Error::BudgetTooSmall {
            budget: initial_budget,
            min_cost,
        });
    }

    let order = initial_order(&ctx, &state.unlabeled)?;
    let chosen = fill_budget(&order, |i| state.unlabeled[i].cost(), initial_budget);
    label_units(&ctx, &mut state, labeler, chosen)?;
    let mut log = RunLog::default();
    train_and_record(&ctx, &mut state, &mut log, labeler, vec![0; ctx.num_classes])?;

    while state.labeled_pixels < total_budget && !state.unlabeled.is_empty() {
        state.iteration += 1;
        let it = state.iteration as u64;
        let pms = predict_train(&ctx, &state.params)?;
        let raw_iou = state
            .raw_iou
            .clone()
            .unwrap_or_else(|| vec![0.0; ctx.num_classes]);

        let high = schedule_high_threshold(&cfg.edge, state.budget_fraction());
        if ctx.toggles.edge_units && high != state.partition_high {
            state.generation += 1;
            state.partition_high = high;
            state.unlabeled = partition_all(&ctx, &state, state.budget_fraction(), state.generation)?;
            log::debug!("iteration {it}: re-cut units at high threshold {high}");
        }

        let pool = sample_candidate_pool(&state.unlabeled, cfg.images_per_round, derive_seed(seed, TAG_POOL, it))?;
        let stats = normalize_perf(&raw_iou, cfg.perf_floor);
        let mut scores = pool
            .par_iter()
            .map(|&i| {
                let u = &state.unlabeled[i];
                balanced_score(&pms[ctx.image_index[u.image_id.as_str()]], u, &stats, ctx.region_area)
            })
            .collect::<Result<Vec<_>>>()?;
        if cfg.balance_center {
            center_balance(&mut scores);
        }
        let strategy = match cfg.strategy {
            Strategy::Balanced if !ctx.toggles.perf_balance => Strategy::Entropy,
            s => s,
        };
        let candidates: Vec<LabelingUnit> = pool.iter().map(|&i| state.unlabeled[i].clone()).collect();
        let budget = cfg.round_budget_pixels.min(total_budget - state.labeled_pixels);
        let picked = select_batch(&candidates, &scores, budget, strategy, derive_seed(seed, TAG_SELECT, it))?;
        if picked.is_empty() {
            log::info!("iteration {it}: no candidate fits the remaining {budget} px");
            state.iteration -= 1;
            break;
        }
        let chosen: Vec<usize> = picked.iter().map(|&k| pool[k]).collect();
        label_units(&ctx, &mut state, labeler, chosen)?;

        let mut counts = vec![0u64; ctx.num_classes];
        if ctx.toggles.pseudo {
            let pm_refs: Vec<&ProbabilityMap> = pms.iter().collect();
            let lm_refs: Vec<&LabelMask> = state.labels.iter().collect();
            let ratios = ratio_thresholds(&raw_iou, &cfg.pseudo);
            state.labels = if ctx.toggles.pseudo_balance {
                generate_pseudo_pool(&pm_refs, &lm_refs, &ratios)?
            } else {
                let total = pseudo_quota(&pm_refs, &lm_refs, &ratios)?;
                generate_pseudo_global(&pm_refs, &lm_refs, total)?
            };
            for lm in &state.labels {
                for (c, n) in pseudo_counts(lm, ctx.num_classes).into_iter().enumerate() {
                    counts[c] += n;
                }
            }
        }
        train_and_record(&ctx, &mut state, &mut log, labeler, counts)?;
    }
    labeler.on_finish();
    Ok(RunOutcome { log, state })
}

fn predict_train(ctx: &Context, params: &ModelParams) -> Result<Vec<ProbabilityMap>> {
    ctx.train_features.par_iter().map(|fm| predict(params, fm)).collect()
}

fn train_and_record(
    ctx: &Context,
    state: &mut RunState,
    log: &mut RunLog,
    labeler: &mut dyn Labeler,
    pseudo_pixel_counts: Vec<u64>,
) -> Result<()> {
    let mut set = PixelSet::new(ctx.train_features[0].dim);
    for (fm, lm) in ctx.train_features.iter().zip(&state.labels) {
        set.extend_from(fm, lm)?;
    }
    let train = ctx.cfg.effective_train();
    let report = fit(
        &mut state.params,
        &set,
        state.raw_iou.as_deref(),
        &train,
        state.epoch,
        derive_seed(ctx.seed, TAG_TRAIN, state.iteration as u64),
    )?;
    state.epoch = report.epoch;

    let pms = predict_train(ctx, &state.params)?;
    state.raw_iou = Some(labeled_iou(&pms, &state.labels, ctx.num_classes)?);

    let test = eval_features(&state.params, &ctx.data.test, &ctx.test_features, ctx.num_classes)?;
    let mut record = LogRecord::new(state.iteration, state.budget_fraction(), state.labeled_pixels, &test);
    record.pseudo_pixel_counts = pseudo_pixel_counts;
    if ctx.cfg.record_wall_time {
        record.wall_time = Some(ctx.started.elapsed().as_secs_f64());
    }
    log::info!(
        "iteration {}: budget {:.4} mIoU {:.4} min IoU {:.4}",
        record.iteration,
        record.budget_fraction,
        record.miou,
        record.min_iou
    );
    labeler.on_record(&record);
    state.history.push(test);
    log.records.push(record);
    Ok(())
}

/// Units of every training image, minus pixels already labeled or skipped.
fn partition_all(ctx: &Context, state: &RunState, budget_fraction: f64, generation: usize) -> Result<Vec<LabelingUnit>> {
    let cfg = ctx.cfg;
    let per_image: Vec<Vec<LabelingUnit>> = ctx
        .data
        .train
        .par_iter()
        .zip(&state.claimed)
        .map(|(s, claimed)| {
            let units = if ctx.toggles.edge_units {
                partition_units(&s.id, &s.image, &cfg.edge, cfg.region_size, budget_fraction)?
            } else {
                grid_units(&s.id, s.image.height(), s.image.width(), cfg.region_size)?
            };
            Ok(units
                .into_iter()
                .filter_map(|mut u| {
                    u.mask.retain(|&p| !claimed[p]);
                    if generation > 0 {
                        u.id = u.id.replacen('/', &format!("/g{generation}/"), 1);
                    }
                    (!u.mask.is_empty()).then_some(u)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Initial selection order over all units: class-balanced through the
/// embedding provider, or a seeded shuffle.
fn initial_order(ctx: &Context, units: &[LabelingUnit]) -> Result<Vec<usize>> {
    let seed = derive_seed(ctx.seed, TAG_INIT, 0);
    if ctx.toggles.clip_init {
        let classes: Option<Vec<Classification>> = if let Some(path) = &ctx.cfg.score_file {
            let provider = ScoreFileProvider::load(path, ctx.num_classes)?;
            Some(classify_all(&provider, units)?)
        } else if ctx.cfg.data.path.is_none() {
            let patches = class_patches(
                &ctx.cfg.data.synth,
                ctx.cfg.prototype_patch,
                derive_seed(ctx.seed, TAG_PATCHES, 0),
            )?;
            let images: HashMap<String, RasterImage> =
                ctx.data.train.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
            let provider = PrototypeProvider::from_patches(&patches, &images);
            Some(classify_all(&provider, units)?)
        } else {
            log::warn!("no score file for an external dataset; initial selection falls back to random");
            None
        };
        if let Some(classes) = classes {
            return Ok(balanced_pick(&classes, units.len(), ctx.num_classes, seed));
        }
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order)
}

fn classify_all<P: EmbeddingProvider + Sync>(provider: &P, units: &[LabelingUnit]) -> Result<Vec<Classification>> {
    units.par_iter().map(|u| provider.classify(u)).collect()
}

/// Walks `order` taking every unit that still fits in `budget`.
fn fill_budget(order: &[usize], cost: impl Fn(usize) -> u64, budget: u64) -> Vec<usize> {
    let mut spent = 0;
    let mut out = Vec::new();
    for &i in order {
        let c = cost(i);
        if spent + c <= budget {
            spent += c;
            out.push(i);
        }
    }
    out
}

/// Sends the units at `chosen` (indices into the unlabeled pool) to the
/// labeler, applies the answers and removes the units from the pool.
fn label_units(ctx: &Context, state: &mut RunState, labeler: &mut dyn Labeler, chosen: Vec<usize>) -> Result<()> {
    let units: Vec<LabelingUnit> = chosen.iter().map(|&i| state.unlabeled[i].clone()).collect();
    let answers = labeler.label_batch(state.iteration, &units)?;
    if answers.len() != units.len() {
        return Err(Error::Labeler(format!("{} answers for {} units", answers.len(), units.len())));
    }
    for (u, a) in units.iter().zip(answers) {
        match a {
            LabelOutcome::Labeled(labels) => apply_labels(ctx, state, u, &labels)?,
            LabelOutcome::Skipped => {
                let img = image_of(ctx, u)?;
                u.mask.iter().for_each(|&p| state.claimed[img][p] = true);
                state.skipped_units.push(u.id.clone());
            }
        }
    }
    let gone: HashSet<usize> = chosen.into_iter().collect();
    let mut k = 0;
    state.unlabeled.retain(|_| {
        let keep = !gone.contains(&k);
        k += 1;
        keep
    });
    Ok(())
}

/// Marks the unit's pixels HUMAN. Labeling an already labeled unit is a no-op.
fn image_of(ctx: &Context, unit: &LabelingUnit) -> Result<usize> {
    ctx.image_index
        .get(unit.image_id.as_str())
        .copied()
        .ok_or_else(|| Error::UnknownUnit(unit.id.clone()))
}

fn apply_labels(ctx: &Context, state: &mut RunState, unit: &LabelingUnit, labels: &[u8]) -> Result<()> {
    if state.labeled_units.iter().any(|id| id == &unit.id) {
        return Ok(());
    }
    if labels.len() as u64 != unit.cost() {
        return Err(Error::Labeler(format!(
            "{} labels for the {} pixels of {}",
            labels.len(),
            unit.cost(),
            unit.id
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= ctx.num_classes) {
        return Err(Error::Labeler(format!("class {bad} in labels for {}", unit.id)));
    }
    let img = image_of(ctx, unit)?;
    for (&p, &l) in unit.mask.iter().zip(labels) {
        state.labels[img].set(p, l, Provenance::Human);
        state.claimed[img][p] = true;
    }
    state.labeled_pixels += unit.cost();
    state.labeled_units.push(unit.id.clone());
    Ok(())
}
