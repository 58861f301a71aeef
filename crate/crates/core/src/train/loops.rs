use std::time::Instant;

use log::{debug, info, warn};

use super::{adam_step, AdamState, EpochRecord, Result, RunHistory, TrainConfig, TrainError};
use crate::augment::{augment_labeled, make_view_pair};
use crate::imagery::{subset, Dataset, ImageTile, MaskBatch, MaskTile, Split};
use crate::metrics::{binarize, confusion_counts_per_item, report, MetricsReport};
use crate::model::{
    embed_loss_grad, forward_segment, init_params, segment_loss_grad, ArchConfig, ImageBatch,
    ModelParams, PredictionMap,
};
use crate::rng::{derive, tag, SplitMix64};

/// Items per forward pass when predicting without gradients.
const EVAL_CHUNK: usize = 32;

fn epoch_order(ids: &[String], seed: u64, epoch: usize) -> Vec<String> {
    let mut order = ids.to_vec();
    SplitMix64::derived(seed, &[tag::SHUFFLE, epoch as u64]).shuffle(&mut order);
    order
}

fn item_seed(seed: u64, epoch: usize, batch: usize, slot: usize) -> u64 {
    derive(
        seed,
        &[tag::AUGMENT, epoch as u64, batch as u64, slot as u64],
    )
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Contrastive pretraining of the encoder and projection head on every
/// train item (masks are ignored). A final partial batch is dropped.
pub fn pretrain(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, RunHistory)> {
    cfg.validate()?;
    let mut params = init_params::<f32>(arch, cfg.seed)?;
    let mut history = RunHistory::default();
    let pool = dataset.ids(Split::Train);
    if pool.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    let n = cfg.batch_size.min(pool.len());
    if n < cfg.batch_size {
        warn!(
            "train pool of {} items is smaller than batch_size {}",
            pool.len(),
            cfg.batch_size
        );
    }
    if n == 1 {
        warn!("contrastive batches of one item carry no negatives; the loss is identically zero");
    }
    let mut state = AdamState::new(params.len());
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(pool, cfg.seed, epoch);
        let mut total = 0.0;
        let batches = order.len() / n;
        for (b, chunk) in order.chunks_exact(n).enumerate() {
            let mut views: Vec<ImageTile> = Vec::with_capacity(2 * n);
            for (slot, id) in chunk.iter().enumerate() {
                let sample = dataset.sample(id).expect("manifest ids have samples");
                let pair = make_view_pair(
                    &sample.image,
                    &cfg.policy,
                    item_seed(cfg.seed, epoch, b, slot),
                    id,
                );
                views.push(pair.view_a);
                views.push(pair.view_b);
            }
            let batch = ImageBatch::<f32>::from_tiles(&views)?;
            let (loss, grad) = embed_loss_grad(&params, &batch, cfg.loss.tau)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(&mut params, &grad, &mut state, cfg)?;
            total += loss as f64;
        }
        let train_loss = total / batches as f64;
        info!("pretrain epoch {epoch}: loss {train_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_iou: None,
            wall_ms: elapsed_ms(start),
        });
    }
    Ok((params, history))
}

fn labelled(dataset: &Dataset, id: &str) -> Result<(ImageTile, MaskTile)> {
    let sample = dataset.sample(id).expect("manifest ids have samples");
    let mask = sample
        .mask
        .clone()
        .ok_or_else(|| TrainError::Unlabelled(id.to_string()))?;
    Ok((sample.image.clone(), mask))
}

/// Supervised focal-loss training of the segmentation network.
///
/// With `init`, the encoder (and projection head) are copied from it and the
/// decoder starts fresh from `cfg.seed`. The train split is first reduced
/// with [`subset`]. The parameters of the best validation epoch are returned.
pub fn finetune(
    init: Option<&ModelParams<f32>>,
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    fraction: f64,
    subset_seed: u64,
) -> Result<(ModelParams<f32>, RunHistory)> {
    cfg.validate()?;
    let mut params = init_params::<f32>(arch, cfg.seed)?;
    if let Some(init) = init {
        params.copy_encoder_from(init)?;
    }
    let mut history = RunHistory::default();
    let sub = subset(&dataset.manifest, fraction, subset_seed)?;
    let train: Vec<String> = sub
        .splits
        .train
        .iter()
        .filter(|id| dataset.sample(id).is_some_and(|s| s.mask.is_some()))
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(TrainError::NoLabelledItems("train"));
    }
    if dataset.ids(Split::Val).is_empty() {
        return Err(TrainError::NoLabelledItems("val"));
    }
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    let mut best = params.clone();
    let mut state = AdamState::new(params.len());
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(&train, cfg.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for (slot, id) in chunk.iter().enumerate() {
                let (image, mask) = labelled(dataset, id)?;
                let (image, mask) = augment_labeled(
                    &image,
                    &mask,
                    &cfg.policy,
                    item_seed(cfg.seed, epoch, b, slot),
                );
                images.push(image);
                masks.push(mask);
            }
            let batch = ImageBatch::<f32>::from_tiles(&images)?;
            let targets = MaskBatch::from_tiles(&masks)?;
            let (loss, grad) =
                segment_loss_grad(&params, &batch, &targets, cfg.loss.alpha, cfg.loss.gamma)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            adam_step(&mut params, &grad, &mut state, cfg)?;
            total += loss as f64;
            batches += 1;
        }
        let val = evaluate(&params, dataset, Split::Val, 0.5)?;
        let train_loss = total / batches as f64;
        debug!(
            "finetune epoch {epoch}: loss {train_loss:.6}, val iou {:.4}",
            val.iou
        );
        let improved = history.push(EpochRecord {
            epoch,
            train_loss,
            val_iou: Some(val.iou),
            wall_ms: elapsed_ms(start),
        });
        if improved {
            best.values_mut().copy_from_slice(params.values());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok((best, history))
}

/// Probabilities for every item of `split`, in manifest order.
pub fn predict(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: Split,
) -> Result<PredictionMap<f32>> {
    let ids = dataset.ids(split);
    let size = dataset.manifest.tile_size;
    let mut probs = Vec::with_capacity(ids.len() * size * size);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let tiles = chunk
            .iter()
            .map(|id| &dataset.sample(id).expect("manifest ids have samples").image);
        let batch = ImageBatch::<f32>::from_tiles(tiles)?;
        probs.extend(forward_segment(params, &batch)?.probs);
    }
    Ok(PredictionMap {
        batch: ids.len(),
        height: size,
        width: size,
        probs,
    })
}

/// Micro IoU of `params` on `split` (no augmentation).
pub fn evaluate(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: Split,
    threshold: f64,
) -> Result<MetricsReport> {
    let ids = dataset.ids(split);
    if ids.is_empty() {
        return Err(TrainError::EmptySplit(match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }));
    }
    let masks = ids
        .iter()
        .map(|id| labelled(dataset, id).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    let truth = MaskBatch::from_tiles(&masks)?;
    let pred = binarize(&predict(params, dataset, split)?, threshold)?;
    let per_item = confusion_counts_per_item(&pred, &truth)?;
    Ok(report(ids, &per_item, threshold))
}
