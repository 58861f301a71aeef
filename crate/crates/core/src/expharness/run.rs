use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use rayon::prelude::*;

use super::data::{corrupt_labels, load_source};
use super::report::{ReportRow, TableReport};
use super::{ExperimentConfig, ExperimentError, ExperimentKind, ExperimentSpec, Init, Result};
use crate::imagery::{Dataset, Split};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelParams;
use crate::train::{evaluate, finetune, pretrain, TrainConfig, TrainError};

/// Pretrained weights keyed by (domain name, seed).
///
/// A cache must only be shared between runs of the same config; it does
/// not look at the architecture or training settings.
#[derive(Debug, Default)]
pub struct PretrainCache {
    entries: Mutex<BTreeMap<(String, u64), ModelParams<f32>>>,
    runs: AtomicUsize,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pretraining runs actually executed through this cache.
    pub fn runs(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }

    fn get(&self, key: &(String, u64)) -> Option<ModelParams<f32>> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn insert(&self, key: (String, u64), params: ModelParams<f32>) {
        self.entries.lock().unwrap().insert(key, params);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RunOptions<'a> {
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Reused across calls when given; otherwise each call gets its own.
    pub cache: Option<&'a PretrainCache>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: TableReport,
    /// Pretraining runs executed by this call (cache hits excluded).
    pub pretrain_runs: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    init: Init,
    pretrain: Option<usize>,
    finetune: usize,
    fraction: f64,
    /// Index into the corruption grid.
    corruption: Option<usize>,
    seed: u64,
}

impl Cell {
    fn order(&self, o: &Cell) -> std::cmp::Ordering {
        (self.init, self.pretrain, self.finetune)
            .cmp(&(o.init, o.pretrain, o.finetune))
            .then(self.fraction.total_cmp(&o.fraction))
            .then((self.corruption, self.seed).cmp(&(o.corruption, o.seed)))
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    spec: &'a ExperimentSpec,
    domains: Vec<Dataset>,
    /// Domain 0 with corrupted train/val labels, one per grid entry.
    corrupted: Vec<Dataset>,
}

impl Context<'_> {
    fn name(&self, domain: usize) -> &str {
        self.spec.domains[domain].name()
    }

    fn describe(&self, c: &Cell) -> String {
        let corruption = c
            .corruption
            .map(|k| self.spec.corruption[k].label())
            .unwrap_or_else(|| "none".into());
        format!(
            "init={} pretrain={} finetune={} fraction={} corruption={} seed={}",
            c.init,
            c.pretrain.map_or("none", |p| self.name(p)),
            self.name(c.finetune),
            c.fraction,
            corruption,
            c.seed
        )
    }
}

fn pretrain_cfg(config: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..config.pretrain_config()
    }
}

fn run_cell(
    ctx: &Context,
    pretrained: &BTreeMap<(String, u64), ModelParams<f32>>,
    cell: &Cell,
) -> Result<ReportRow> {
    let wrap = |source: TrainError| ExperimentError::Cell {
        cell: ctx.describe(cell),
        source,
    };
    let train_ds = match cell.corruption {
        Some(k) => &ctx.corrupted[k],
        None => &ctx.domains[cell.finetune],
    };
    let init = cell
        .pretrain
        .map(|p| &pretrained[&(ctx.name(p).to_string(), cell.seed)]);
    let cfg = TrainConfig {
        seed: cell.seed,
        ..ctx.config.finetune_config()
    };
    let (params, history) = finetune(
        init,
        train_ds,
        &ctx.config.arch,
        &cfg,
        cell.fraction,
        cell.seed,
    )
    .map_err(wrap)?;
    let test = evaluate(
        &params,
        &ctx.domains[cell.finetune],
        Split::Test,
        DEFAULT_THRESHOLD,
    )
    .map_err(wrap)?;
    let max_val_iou = match history.best_val_iou {
        Some(v) => v,
        None => {
            evaluate(&params, train_ds, Split::Val, DEFAULT_THRESHOLD)
                .map_err(wrap)?
                .iou
        }
    };
    info!(
        "{}: test iou {:.4}, max val iou {:.4}",
        ctx.describe(cell),
        test.iou,
        max_val_iou
    );
    Ok(ReportRow {
        init: cell.init,
        pretrain_domain: cell.pretrain.map_or("none", |p| ctx.name(p)).to_string(),
        finetune_domain: ctx.name(cell.finetune).to_string(),
        fraction: cell.fraction,
        corruption: cell
            .corruption
            .map(|k| ctx.spec.corruption[k].label())
            .unwrap_or_else(|| "none".into()),
        seed: cell.seed,
        test_iou: test.iou,
        max_val_iou,
    })
}

fn execute(
    config: &ExperimentConfig,
    mut cells: Vec<Cell>,
    opts: RunOptions,
) -> Result<SweepOutcome> {
    config.validate()?;
    let spec = config
        .experiment
        .as_ref()
        .ok_or_else(|| ExperimentError::InvalidSpec("config has no experiment section".into()))?;
    cells.sort_by(Cell::order);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| ExperimentError::InvalidSpec(format!("thread pool: {e}")))?;
    let local = PretrainCache::new();
    let cache = opts.cache.unwrap_or(&local);
    pool.install(|| {
        let domains = spec
            .domains
            .iter()
            .map(load_source)
            .collect::<Result<Vec<_>>>()?;
        let corrupted = if spec.kind == ExperimentKind::CorruptionAblation {
            spec.corruption
                .iter()
                .map(|c| corrupt_labels(&domains[0], c, spec.corruption_seed))
                .collect::<std::result::Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let ctx = Context {
            config,
            spec,
            domains,
            corrupted,
        };

        let needed: BTreeSet<(usize, u64)> = cells
            .iter()
            .filter_map(|c| c.pretrain.map(|p| (p, c.seed)))
            .collect();
        let missing: Vec<(usize, u64)> = needed
            .iter()
            .copied()
            .filter(|&(p, s)| cache.get(&(ctx.name(p).to_string(), s)).is_none())
            .collect();
        let runs = missing.len();
        let fresh = missing
            .par_iter()
            .map(|&(p, seed)| {
                info!("pretraining on {} with seed {seed}", ctx.name(p));
                cache.runs.fetch_add(1, Ordering::SeqCst);
                pretrain(&ctx.domains[p], &config.arch, &pretrain_cfg(config, seed))
                    .map(|(params, _)| ((ctx.name(p).to_string(), seed), params))
                    .map_err(|source| ExperimentError::Cell {
                        cell: format!("pretrain={} seed={seed}", ctx.name(p)),
                        source,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        for (key, params) in fresh {
            cache.insert(key, params);
        }
        let pretrained: BTreeMap<(String, u64), ModelParams<f32>> = needed
            .iter()
            .map(|&(p, s)| {
                let key = (ctx.name(p).to_string(), s);
                let params = cache.get(&key).expect("pretrained above");
                (key, params)
            })
            .collect();

        let rows = cells
            .par_iter()
            .map(|c| run_cell(&ctx, &pretrained, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepOutcome {
            report: TableReport::from_rows(rows),
            pretrain_runs: runs,
        })
    })
}

fn expect_kind(config: &ExperimentConfig, kind: ExperimentKind) -> Result<&ExperimentSpec> {
    match &config.experiment {
        Some(s) if s.kind == kind => Ok(s),
        Some(s) => Err(ExperimentError::InvalidSpec(format!(
            "expected {kind:?}, config has {:?}",
            s.kind
        ))),
        None => Err(ExperimentError::InvalidSpec(
            "config has no experiment section".into(),
        )),
    }
}

/// Every init x fraction x seed on one domain, tested on its full test split.
pub fn run_subset_sweep(config: &ExperimentConfig, opts: RunOptions) -> Result<SweepOutcome> {
    let spec = expect_kind(config, ExperimentKind::SubsetSweep)?;
    let mut cells = Vec::new();
    for &init in &spec.inits {
        for &fraction in &spec.fractions {
            for seed in spec.seeds() {
                cells.push(Cell {
                    init,
                    pretrain: (init == Init::SslPretrained).then_some(0),
                    finetune: 0,
                    fraction,
                    corruption: None,
                    seed,
                });
            }
        }
    }
    execute(config, cells, opts)
}

/// Pretrain on A or B, fine-tune and test on A or B. Scratch baselines are
/// added per fine-tune domain when `inits` includes scratch.
pub fn run_cross_domain(config: &ExperimentConfig, opts: RunOptions) -> Result<SweepOutcome> {
    let spec = expect_kind(config, ExperimentKind::CrossDomain)?;
    let mut cells = Vec::new();
    for &init in &spec.inits {
        let pretrains: Vec<Option<usize>> = match init {
            Init::Scratch => vec![None],
            Init::SslPretrained => vec![Some(0), Some(1)],
        };
        for pretrain in pretrains {
            for finetune in 0..2 {
                for &fraction in &spec.fractions {
                    for seed in spec.seeds() {
                        cells.push(Cell {
                            init,
                            pretrain,
                            finetune,
                            fraction,
                            corruption: None,
                            seed,
                        });
                    }
                }
            }
        }
    }
    execute(config, cells, opts)
}

/// Fine-tune on corrupted train/val labels, test against clean labels.
pub fn run_corruption_ablation(
    config: &ExperimentConfig,
    opts: RunOptions,
) -> Result<SweepOutcome> {
    let spec = expect_kind(config, ExperimentKind::CorruptionAblation)?;
    let mut cells = Vec::new();
    for k in 0..spec.corruption.len() {
        for &init in &spec.inits {
            for &fraction in &spec.fractions {
                for seed in spec.seeds() {
                    cells.push(Cell {
                        init,
                        pretrain: (init == Init::SslPretrained).then_some(0),
                        finetune: 0,
                        fraction,
                        corruption: Some(k),
                        seed,
                    });
                }
            }
        }
    }
    execute(config, cells, opts)
}

pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<SweepOutcome> {
    match config.experiment.as_ref().map(|s| s.kind) {
        Some(ExperimentKind::SubsetSweep) => run_subset_sweep(config, opts),
        Some(ExperimentKind::CrossDomain) => run_cross_domain(config, opts),
        Some(ExperimentKind::CorruptionAblation) => run_corruption_ablation(config, opts),
        None => Err(ExperimentError::InvalidSpec(
            "config has no experiment section".into(),
        )),
    }
}
