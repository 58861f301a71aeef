//! Small U-Net style segmentation network with a contrastive projection head.
//!
//! Topology for `depth = D`, `base_width = w`, `c(l) = w * 2^l`:
//!
//! ```text
//! enc{l}      l = 0..D   conv3x3 -> relu -> conv3x3 -> relu, then 2x2 average pool
//! bottleneck             conv3x3 -> relu -> conv3x3 -> relu        (c(D) channels)
//! dec{l}      l = D-1..0 nearest x2 upsample -> conv3x3 -> relu (c(l+1) -> c(l)),
//!                        concat with enc{l} skip, conv3x3 -> relu -> conv3x3 -> relu
//! head                   conv1x1 -> one logit per pixel -> sigmoid
//! proj                   GAP(bottleneck) -> fc1 (2E) -> relu -> fc2 (E) -> L2 normalize
//! ```
//!
//! All convolutions are zero-padded "same" convolutions. Parameters live in
//! one flat buffer addressed by a name -> (shape, offset) index.

mod checkpoint;
mod layers;
mod net;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::ImageTile;
use crate::real::Real;
use crate::rng::{tag, SplitMix64};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};
pub use net::{
    embed_loss_grad, forward_embed, forward_logits, forward_segment, rectifier_pattern,
    segment_loss_grad, Branch, PROB_EPS,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {field} {reason}")]
    InvalidArch { field: &'static str, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub tile: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 8,
            depth: 3,
            embed_dim: 32,
            tile: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(ModelError::InvalidArch { field, reason });
        if self.in_channels != 3 {
            return bad(
                "in_channels",
                format!("must be 3, got {}", self.in_channels),
            );
        }
        if self.base_width < 2 {
            return bad(
                "base_width",
                format!("must be >= 2, got {}", self.base_width),
            );
        }
        if self.embed_dim < 2 {
            return bad("embed_dim", format!("must be >= 2, got {}", self.embed_dim));
        }
        if self.depth == 0 || self.depth > 8 {
            return bad("depth", format!("must be in 1..=8, got {}", self.depth));
        }
        if self.tile < 8 || !self.tile.is_multiple_of(1 << self.depth) {
            return bad(
                "tile",
                format!(
                    "{} must be >= 8 and divisible by 2^{}",
                    self.tile, self.depth
                ),
            );
        }
        Ok(())
    }

    /// Channel count at level `l`; level `depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn embed_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encoder tensors are the ones carried from pretraining to fine-tuning.
    pub fn is_encoder(&self) -> bool {
        self.name.starts_with("enc") || self.name.starts_with("bottleneck")
    }
}

/// Offsets of one convolution's weight and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvSlot {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LinearSlot {
    pub w: usize,
    pub b: usize,
    pub fin: usize,
    pub fout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecoderSlots {
    pub up: ConvSlot,
    pub conv1: ConvSlot,
    pub conv2: ConvSlot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub enc: Vec<[ConvSlot; 2]>,
    pub bottleneck: [ConvSlot; 2],
    /// Indexed by level.
    pub dec: Vec<DecoderSlots>,
    pub head: ConvSlot,
    pub fc1: LinearSlot,
    pub fc2: LinearSlot,
    pub entries: Vec<TensorEntry>,
    pub total: usize,
}

struct LayoutBuilder {
    entries: Vec<TensorEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let entry = TensorEntry {
            name,
            shape,
            offset,
        };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> ConvSlot {
        let w = self.push(format!("{prefix}.weight"), vec![cout, cin, k, k]);
        let b = self.push(format!("{prefix}.bias"), vec![cout]);
        ConvSlot { w, b, cin, cout }
    }

    fn linear(&mut self, prefix: &str, fin: usize, fout: usize) -> LinearSlot {
        let w = self.push(format!("{prefix}.weight"), vec![fout, fin]);
        let b = self.push(format!("{prefix}.bias"), vec![fout]);
        LinearSlot { w, b, fin, fout }
    }
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut lb = LayoutBuilder {
            entries: Vec::new(),
            total: 0,
        };
        let d = arch.depth;
        let mut enc = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 {
                arch.in_channels
            } else {
                arch.channels(l - 1)
            };
            let c = arch.channels(l);
            enc.push([
                lb.conv(&format!("enc{l}.conv1"), cin, c, 3),
                lb.conv(&format!("enc{l}.conv2"), c, c, 3),
            ]);
        }
        let cb = arch.channels(d);
        let bottleneck = [
            lb.conv("bottleneck.conv1", arch.channels(d - 1), cb, 3),
            lb.conv("bottleneck.conv2", cb, cb, 3),
        ];
        let mut dec = vec![None; d];
        for l in (0..d).rev() {
            let c = arch.channels(l);
            dec[l] = Some(DecoderSlots {
                up: lb.conv(&format!("dec{l}.up"), arch.channels(l + 1), c, 3),
                conv1: lb.conv(&format!("dec{l}.conv1"), 2 * c, c, 3),
                conv2: lb.conv(&format!("dec{l}.conv2"), c, c, 3),
            });
        }
        let head = lb.conv("head", arch.channels(0), 1, 1);
        let fc1 = lb.linear("proj.fc1", cb, arch.embed_hidden());
        let fc2 = lb.linear("proj.fc2", arch.embed_hidden(), arch.embed_dim);
        Self {
            enc,
            bottleneck,
            dec: dec
                .into_iter()
                .map(|s| s.expect("every level filled"))
                .collect(),
            head,
            fc1,
            fc2,
            entries: lb.entries,
            total: lb.total,
        }
    }
}

/// All learnable tensors of the network in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    arch: ArchConfig,
    layout: Layout,
    values: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let values = vec![T::zero(); layout.total];
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub(crate) fn from_parts(arch: ArchConfig, values: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.total {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Name -> (shape, offset) index, in buffer order.
    pub fn index(&self) -> &[TensorEntry] {
        &self.layout.entries
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::UnknownTensor(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&[T]> {
        let e = self.entry(name)?;
        Ok(&self.values[e.offset..e.offset + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let e = self.entry(name)?.clone();
        Ok(&mut self.values[e.offset..e.offset + e.len()])
    }

    /// Name of the tensor holding flat parameter `i`.
    pub fn tensor_of(&self, i: usize) -> Option<&str> {
        self.layout
            .entries
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len())
            .map(|e| e.name.as_str())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            layout: self.layout.clone(),
            values: self
                .values
                .iter()
                .map(|&v| U::of(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Copy every encoder tensor (and the projection head) from `other`.
    /// Both sides must share the encoder geometry.
    pub fn copy_encoder_from(&mut self, other: &ModelParams<T>) -> Result<()> {
        for e in other
            .index()
            .iter()
            .filter(|e| e.is_encoder() || e.name.starts_with("proj"))
        {
            let mine = self.entry(&e.name)?.clone();
            if mine.shape != e.shape {
                return Err(ModelError::DimensionMismatch(format!(
                    "{}: {:?} vs {:?}",
                    e.name, mine.shape, e.shape
                )));
            }
            self.values[mine.offset..mine.offset + mine.len()]
                .copy_from_slice(&other.values[e.offset..e.offset + e.len()]);
        }
        Ok(())
    }
}

/// Fan-in scaled uniform weights `U[-sqrt(3 / fan_in), sqrt(3 / fan_in)]`,
/// zero biases. Draws are taken in buffer order from one seeded stream.
pub fn init_params<T: Real>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::zeros(*arch)?;
    let mut rng = SplitMix64::derived(seed, &[tag::INIT]);
    for e in params.layout.entries.clone() {
        if e.shape.len() == 1 {
            continue;
        }
        let fan_in: usize = e.shape[1..].iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        for v in &mut params.values[e.offset..e.offset + e.len()] {
            *v = T::of(rng.uniform(-bound, bound));
        }
    }
    Ok(params)
}

/// Images stacked item-major, each stored channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn from_tiles<'a>(tiles: impl IntoIterator<Item = &'a ImageTile>) -> Result<Self> {
        let mut data = Vec::new();
        let mut batch = 0;
        let mut size = 0;
        for t in tiles {
            if t.width() != t.height() {
                return Err(ModelError::DimensionMismatch(format!(
                    "tiles must be square, got {}x{}",
                    t.width(),
                    t.height()
                )));
            }
            if batch == 0 {
                size = t.width();
            } else if t.width() != size {
                return Err(ModelError::DimensionMismatch(
                    "tiles in a batch differ in size".into(),
                ));
            }
            for c in 0..3 {
                data.extend(t.pixels().iter().map(|p| T::of(p[c] as f64)));
            }
            batch += 1;
        }
        Ok(Self {
            batch,
            channels: 3,
            size,
            data,
        })
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Per-pixel panel probabilities, item-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<T>,
}

impl<T: Real> PredictionMap<T> {
    pub fn item(&self, i: usize) -> &[T] {
        let n = self.height * self.width;
        &self.probs[i * n..(i + 1) * n]
    }
}

/// `rows x dim` embeddings; rows `2k` and `2k + 1` are the two views of
/// source item `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> EmbeddingBatch<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * dim, "embedding buffer length");
        Self { rows, dim, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_covers_buffer_exactly_once() {
        for arch in [
            ArchConfig::default(),
            ArchConfig {
                base_width: 2,
                depth: 1,
                tile: 8,
                embed_dim: 4,
                ..Default::default()
            },
        ] {
            let p = init_params::<f32>(&arch, 1).unwrap();
            let mut cover = vec![0u8; p.len()];
            for e in p.index() {
                for c in &mut cover[e.offset..e.offset + e.len()] {
                    *c += 1;
                }
            }
            assert!(cover.iter().all(|&c| c == 1));
            let mut names: Vec<_> = p.index().iter().map(|e| e.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), p.index().len());
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ArchConfig::default();
        let a = init_params::<f32>(&arch, 42).unwrap();
        let b = init_params::<f32>(&arch, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f32>(&arch, 43).unwrap());
        for e in a.index().iter().filter(|e| e.shape.len() == 1) {
            assert!(a.tensor(&e.name).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_weights_respect_fan_in_bound() {
        let arch = ArchConfig::default();
        let p = init_params::<f64>(&arch, 3).unwrap();
        for e in p
            .index()
            .iter()
            .filter(|e| e.shape.len() == 4 && e.shape[2] == 3)
        {
            let cin = e.shape[1];
            let bound = (1.0 / (9.0 * cin as f64)).sqrt() * 3f64.sqrt();
            let w = p.tensor(&e.name).unwrap();
            assert!(w.iter().all(|v| v.abs() <= bound), "{}", e.name);
            // the draws actually spread over the interval
            let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max > 0.8 * bound, "{}", e.name);
        }
    }

    #[test]
    fn arch_validation() {
        let ok = ArchConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            ArchConfig { tile: 36, ..ok },
            ArchConfig {
                base_width: 1,
                ..ok
            },
            ArchConfig { embed_dim: 1, ..ok },
            ArchConfig {
                in_channels: 4,
                ..ok
            },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(ModelError::InvalidArch { .. })
            ));
        }
    }

    #[test]
    fn encoder_copy_transfers_only_encoder_and_projection() {
        let arch = ArchConfig::default();
        let src = init_params::<f32>(&arch, 1).unwrap();
        let mut dst = init_params::<f32>(&arch, 2).unwrap();
        dst.copy_encoder_from(&src).unwrap();
        for e in src.index() {
            let same = src.tensor(&e.name).unwrap() == dst.tensor(&e.name).unwrap();
            let carried = e.is_encoder() || e.name.starts_with("proj");
            if e.shape.len() > 1 {
                assert_eq!(same, carried, "{}", e.name);
            }
        }
    }
}
