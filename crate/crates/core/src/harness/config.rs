use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{Strategy, DEFAULT_PERF_FLOOR};
use crate::edge::EdgeConfig;
use crate::error::{Error, Result};
use crate::model::{ContrastiveConfig, TrainConfig, DEFAULT_EMBED_DIM};
use crate::pseudo::PseudoConfig;
use crate::synth::SynthSpec;

/// Optional per-component switches. Unset entries follow the strategy: the
/// balanced strategy turns everything on, the entropy and random baselines
/// turn everything off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToggleOverrides {
    pub edge_units: Option<bool>,
    pub clip_init: Option<bool>,
    pub perf_balance: Option<bool>,
    pub pseudo: Option<bool>,
    pub pseudo_balance: Option<bool>,
    pub contrastive: Option<bool>,
    pub contrastive_balance: Option<bool>,
}

/// Resolved switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Edge-guided units next to grid cells; otherwise grid cells only.
    pub edge_units: bool,
    /// Class-balanced initial pick through the embedding provider; otherwise random.
    pub clip_init: bool,
    /// Weight uncertainty by class balance; otherwise rank by entropy alone.
    pub perf_balance: bool,
    pub pseudo: bool,
    /// Class-specific pseudo-label ratios; otherwise one global cut with the
    /// same total count.
    pub pseudo_balance: bool,
    pub contrastive: bool,
    /// Contrastive anchors from below-mean classes; otherwise from all classes.
    pub contrastive_balance: bool,
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            edge_units: on,
            clip_init: on,
            perf_balance: on,
            pseudo: on,
            pseudo_balance: on,
            contrastive: on,
            contrastive_balance: on,
        }
    }
}

impl ToggleOverrides {
    pub fn resolve(&self, strategy: Strategy) -> Toggles {
        let d = Toggles::all(strategy == Strategy::Balanced);
        Toggles {
            edge_units: self.edge_units.unwrap_or(d.edge_units),
            clip_init: self.clip_init.unwrap_or(d.clip_init),
            perf_balance: self.perf_balance.unwrap_or(d.perf_balance),
            pseudo: self.pseudo.unwrap_or(d.pseudo),
            pseudo_balance: self.pseudo_balance.unwrap_or(d.pseudo_balance),
            contrastive: self.contrastive.unwrap_or(d.contrastive),
            contrastive_balance: self.contrastive_balance.unwrap_or(d.contrastive_balance),
        }
    }
}

/// Where the images come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory with a manifest; when unset a synthetic set is
    /// generated from `synth` and `seed`.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub strategy: Strategy,
    pub toggles: ToggleOverrides,
    pub region_size: usize,
    pub initial_fraction: f64,
    pub round_budget_pixels: u64,
    pub total_budget_fraction: f64,
    pub epochs_per_round: usize,
    pub images_per_round: usize,
    pub seeds: Vec<u64>,
    pub embed_dim: usize,
    pub edge: EdgeConfig,
    pub train: TrainConfig,
    pub pseudo: PseudoConfig,
    /// Subtract the pool mean of the balance term before the sigmoid.
    pub balance_center: bool,
    pub perf_floor: f64,
    /// Side of the per-class reference patches used by the prototype provider.
    pub prototype_patch: usize,
    /// Imported `{unit_id, class, confidence}` classifications; replaces the
    /// prototype provider when set.
    pub score_file: Option<PathBuf>,
    /// Adds elapsed seconds to each log record (makes logs non-reproducible).
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            strategy: Strategy::Balanced,
            toggles: ToggleOverrides::default(),
            region_size: 80,
            initial_fraction: 0.05,
            round_budget_pixels: 500 * 80 * 80,
            total_budget_fraction: 0.20,
            epochs_per_round: 50,
            images_per_round: 100,
            seeds: vec![0],
            embed_dim: DEFAULT_EMBED_DIM,
            edge: EdgeConfig::default(),
            train: TrainConfig::default(),
            pseudo: PseudoConfig::default(),
            balance_center: false,
            perf_floor: DEFAULT_PERF_FLOOR,
            prototype_patch: 32,
            score_file: None,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    /// Scaled-down setup that runs in seconds on the default synthetic
    /// dataset (64x64 images): 8-pixel cells, small blur and dilation
    /// kernels, 2.5% of the pool per round and capped optimizer steps.
    pub fn desk() -> Self {
        Self {
            region_size: 8,
            round_budget_pixels: 2_400,
            images_per_round: 8,
            edge: EdgeConfig {
                gaussian_kernel: 5,
                dilation_kernel: 3,
                max_unit_pixels: 64,
                ..EdgeConfig::default()
            },
            train: TrainConfig {
                batch_size: 2048,
                max_steps_per_epoch: 2,
                ..TrainConfig::default()
            },
            prototype_patch: 16,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn toggles(&self) -> Toggles {
        self.toggles.resolve(self.strategy)
    }

    /// Training settings with the contrastive switches applied.
    pub fn effective_train(&self) -> TrainConfig {
        let t = self.toggles();
        let mut train = self.train.clone();
        train.epochs = self.epochs_per_round;
        train.contrastive = ContrastiveConfig {
            weight: if t.contrastive { self.train.contrastive.weight } else { 0.0 },
            balance: t.contrastive_balance,
            ..self.train.contrastive.clone()
        };
        train
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_fraction > 0.0
            && self.initial_fraction <= self.total_budget_fraction
            && self.total_budget_fraction <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 < initial_fraction ({}) <= total_budget_fraction ({}) <= 1",
                self.initial_fraction, self.total_budget_fraction
            )));
        }
        if self.region_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "region size must be at least 8, got {}",
                self.region_size
            )));
        }
        if self.round_budget_pixels == 0 || self.images_per_round == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "round budget, images per round and embedding width must be positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds".into()));
        }
        self.edge.validate()?;
        self.pseudo.validate()?;
        self.train.validate()
    }
}
