use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use albalance::acquisition::{balanced_score, normalize_perf, select_batch, Strategy};
use albalance::alrt::{load_label_mask, save_label_mask};
use albalance::dataset::Dataset;
use albalance::harness::{
    eval_checkpoint, load_dataset, run_loop, Journal, JournaledLabeler, Labeler, OracleLabeler, RunConfig, RunLog,
};
use albalance::model::{extract_features, feature_dim, fit, load_model, predict, save_model, ModelParams, PixelSet};
use albalance::pseudo::{generate_pseudo_pool, pseudo_counts, ratio_thresholds};
use albalance::raster::{LabelMask, ProbabilityMap};
use albalance::units::{grid_units, partition_units, LabelingUnit, UnitRecord};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "albalance", version, about = "Edge-guided, class-balanced active learning for segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags given here take precedence
/// over the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces the config's seed list.
    #[arg(long, global = true, env = "ALBALANCE_SEED")]
    seed: Option<u64>,
    /// Dataset directory with a manifest.json, instead of synthetic data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Seed of the synthetic dataset.
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Total labeling budget as a fraction of training pixels.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Start from the scaled-down desk preset instead of the full defaults.
    #[arg(long, global = true)]
    desk: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut every training image into labeling units (JSON lines).
    Partition {
        #[arg(long)]
        out: PathBuf,
        /// Budget fraction that drives the edge threshold schedule.
        #[arg(long, default_value_t = 0.0)]
        at_fraction: f64,
    },
    /// Train a model on full ground truth, or on saved label masks.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<image id>.alrt` label masks to train on.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score units with a model and select a batch within a pixel budget.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        pixels: u64,
        /// Per-class IoU for the balance term; measured on the training split if absent.
        #[arg(long, value_delimiter = ',')]
        class_iou: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write class-balanced pseudo-labels for every training image.
    Pseudo {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',')]
        class_iou: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the simulated active-learning loop with an oracle labeler.
    Loop {
        /// Directory for one `runlog-<seed>.jsonl` per seed.
        #[arg(long)]
        out: PathBuf,
        /// Write-ahead journal; an existing file resumes the run.
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Score a saved model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the loop with a human annotator behind the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        journal: PathBuf,
        /// Static assets of the annotation console.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Where to write the run log once the budget is spent.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None if self.desk => RunConfig::desk(),
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(path) = &self.data {
            cfg.data.path = Some(path.clone());
        }
        if let Some(seed) = self.data_seed {
            cfg.data.seed = seed;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(b) = self.budget {
            cfg.total_budget_fraction = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = cli.common.run_config()?;
    let data = load_dataset(&cfg).context("loading dataset")?;
    let seed = cfg.seeds[0];
    match cli.command {
        Command::Synth { out } => {
            data.save(&out)?;
            println!("wrote {} train and {} test images to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Partition { out, at_fraction } => {
            let mut w = BufWriter::new(File::create(&out)?);
            let mut n = 0;
            for s in &data.train {
                let units = if cfg.toggles().edge_units {
                    partition_units(&s.id, &s.image, &cfg.edge, cfg.region_size, at_fraction)?
                } else {
                    grid_units(&s.id, s.image.height(), s.image.width(), cfg.region_size)?
                };
                for u in &units {
                    serde_json::to_writer(&mut w, &UnitRecord::from(u))?;
                    writeln!(w)?;
                }
                n += units.len();
            }
            w.flush()?;
            println!("wrote {n} units to {}", out.display());
        }
        Command::Train { out, labels, epochs } => {
            let masks = match &labels {
                Some(dir) => load_masks(dir, &data)?,
                None => data.train.iter().map(|s| s.truth.clone()).collect(),
            };
            let params = train(&cfg, &data, &masks, epochs.unwrap_or(cfg.epochs_per_round), seed)?;
            save_model(&out, &params, seed, epochs.unwrap_or(cfg.epochs_per_round))?;
            let report = eval_checkpoint(&params, &data.test, data.num_classes())?;
            println!("saved {}; test mIoU {:.4}", out.display(), report.miou);
        }
        Command::Select {
            model,
            units,
            pixels,
            class_iou,
            out,
        } => {
            let (params, _) = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let units = read_units(&units)?;
            let pms = predict_all(&params, &data)?;
            let raw = match class_iou {
                Some(v) => v,
                None => eval_checkpoint(&params, &data.train, data.num_classes())?.per_class_iou,
            };
            check_len(&raw, data.num_classes())?;
            let stats = normalize_perf(&raw, cfg.perf_floor);
            let area = (cfg.region_size * cfg.region_size) as f64;
            let index = image_index(&data);
            let scores = units
                .iter()
                .map(|u| {
                    let i = *index.get(u.image_id.as_str()).with_context(|| format!("unknown image {}", u.image_id))?;
                    Ok(balanced_score(&pms[i], u, &stats, area)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let picked = select_batch(&units, &scores, pixels, cfg.strategy, seed)?;
            let mut w = BufWriter::new(File::create(&out)?);
            for &i in &picked {
                serde_json::to_writer(&mut w, &UnitRecord::from(&units[i]))?;
                writeln!(w)?;
            }
            w.flush()?;
            let cost: u64 = picked.iter().map(|&i| units[i].cost()).sum();
            println!("selected {} units ({cost} px) into {}", picked.len(), out.display());
        }
        Command::Pseudo { model, class_iou, out } => {
            let (params, _) = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let pms = predict_all(&params, &data)?;
            let raw = match class_iou {
                Some(v) => v,
                None => eval_checkpoint(&params, &data.train, data.num_classes())?.per_class_iou,
            };
            check_len(&raw, data.num_classes())?;
            let empty: Vec<LabelMask> = data
                .train
                .iter()
                .map(|s| LabelMask::unlabeled(s.image.height(), s.image.width()))
                .collect();
            let ratios = ratio_thresholds(&raw, &cfg.pseudo);
            let masks = generate_pseudo_pool(&pms.iter().collect::<Vec<_>>(), &empty.iter().collect::<Vec<_>>(), &ratios)?;
            std::fs::create_dir_all(&out)?;
            let mut counts = vec![0u64; data.num_classes()];
            for (s, m) in data.train.iter().zip(&masks) {
                save_label_mask(out.join(format!("{}.alrt", s.id)), m)?;
                pseudo_counts(m, data.num_classes())
                    .into_iter()
                    .enumerate()
                    .for_each(|(c, n)| counts[c] += n);
            }
            println!("ratios {ratios:?}; pseudo pixels per class {counts:?}");
        }
        Command::Loop { out, journal } => {
            std::fs::create_dir_all(&out)?;
            for &seed in &cfg.seeds {
                let oracle = OracleLabeler::new(&data.train);
                let log = match &journal {
                    Some(path) => {
                        let mut labeler = JournaledLabeler {
                            inner: oracle,
                            journal: Journal::open(seeded_path(path, seed, cfg.seeds.len()))?,
                        };
                        run(&cfg, &data, seed, &mut labeler)?
                    }
                    None => run(&cfg, &data, seed, &mut { oracle })?,
                };
                let path = out.join(format!("runlog-{seed}.jsonl"));
                std::fs::write(&path, log.to_jsonl()?)?;
                let last = log.last().context("empty run log")?;
                println!(
                    "seed {seed}: {} iterations, budget {:.3}, mIoU {:.4}, min-class IoU {:.4} -> {}",
                    last.iteration,
                    last.budget_fraction,
                    last.miou,
                    last.min_iou,
                    path.display()
                );
            }
        }
        Command::Eval { model } => {
            let (params, _) = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let report = eval_checkpoint(&params, &data.test, data.num_classes())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve {
            addr,
            journal,
            assets,
            out,
        } => {
            let session = albalance_serve::Session::new(&data, Journal::open(&journal)?);
            let loop_session = Arc::clone(&session);
            let worker = std::thread::spawn(move || -> Result<()> {
                let mut labeler = loop_session.labeler();
                let log = run(&cfg, &data, seed, &mut labeler)?;
                std::fs::write(&out, log.to_jsonl()?)?;
                log::info!("budget spent; run log written to {}", out.display());
                Ok(())
            });
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.spawn(async move {
                if let Err(e) = albalance_serve::serve(session, addr, assets.as_deref()).await {
                    log::error!("server stopped: {e}");
                }
            });
            worker.join().map_err(|_| anyhow::anyhow!("loop thread panicked"))??;
            // Keep answering status and metrics requests until interrupted.
            runtime.block_on(std::future::pending::<()>());
        }
    }
    Ok(())
}

fn run(cfg: &RunConfig, data: &Dataset, seed: u64, labeler: &mut dyn Labeler) -> Result<RunLog> {
    Ok(run_loop(cfg, data, seed, labeler)?.log)
}

/// One journal per seed when several seeds share a path.
fn seeded_path(path: &Path, seed: u64, seeds: usize) -> PathBuf {
    if seeds == 1 {
        return path.to_path_buf();
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{seed}"));
    path.with_file_name(name)
}

fn check_len(raw: &[f64], num_classes: usize) -> Result<()> {
    if raw.len() != num_classes {
        bail!("{} class IoU values for {num_classes} classes", raw.len());
    }
    Ok(())
}

fn image_index(data: &Dataset) -> std::collections::HashMap<&str, usize> {
    data.train.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

fn predict_all(params: &ModelParams, data: &Dataset) -> Result<Vec<ProbabilityMap>> {
    data.train
        .iter()
        .map(|s| Ok(predict(params, &extract_features(&s.image))?))
        .collect()
}

fn load_masks(dir: &Path, data: &Dataset) -> Result<Vec<LabelMask>> {
    data.train
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.alrt", s.id));
            load_label_mask(&path).with_context(|| format!("reading {}", path.display()))
        })
        .collect()
}

fn read_units(path: &Path) -> Result<Vec<LabelingUnit>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut units = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UnitRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        units.push(record.try_into()?);
    }
    Ok(units)
}

fn train(cfg: &RunConfig, data: &Dataset, masks: &[LabelMask], epochs: usize, seed: u64) -> Result<ModelParams> {
    let first = data.train.first().context("empty training split")?;
    let mut set = PixelSet::new(feature_dim(first.image.channels()));
    for (s, m) in data.train.iter().zip(masks) {
        set.extend_from(&extract_features(&s.image), m)?;
    }
    let mut params = ModelParams::init(set.dim, cfg.embed_dim, data.num_classes(), seed);
    let mut train = cfg.effective_train();
    train.epochs = epochs;
    fit(&mut params, &set, None, &train, 0, seed)?;
    Ok(params)
}
