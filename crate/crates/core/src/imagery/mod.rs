//! Image and mask tiles, datasets, tiling, subsetting, and the synthetic
//! scene and label-corruption generators.

mod corrupt;
mod dataset;
mod scene;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{tag, SplitMix64};

pub use corrupt::{connected_components, corrupt_mask, CorruptionSpec};
pub use dataset::{
    load_dataset, read_image, read_mask, write_dataset, write_image, write_mask, Dataset, Sample,
};
pub use scene::{generate_scene, plan_scene, rasterize, Domain, PanelRect, ScenePlan, SceneSpec};

/// Smallest tile edge accepted anywhere in the pipeline.
pub const MIN_TILE: usize = 8;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("{path}: mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        path: PathBuf,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("{path}: mask pixel value {value} is neither 0 nor 255")]
    NonBinaryMask { path: PathBuf, value: u8 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("tile {tile} does not fit a {width}x{height} image")]
    TileTooLarge {
        tile: usize,
        width: usize,
        height: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("subset fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("train split is empty")]
    EmptyTrainSplit,
}

pub type Result<T> = std::result::Result<T, ImageryError>;

/// An RGB tile with channels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl ImageTile {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if width < MIN_TILE || height < MIN_TILE {
            return Err(ImageryError::InvalidTile(format!(
                "{width}x{height} is smaller than {MIN_TILE}x{MIN_TILE}"
            )));
        }
        if pixels.len() != width * height {
            return Err(ImageryError::InvalidTile(format!(
                "expected {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageryError::InvalidTile(format!(
                "channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    /// Apply `f` to every pixel and clamp the result into `[0, 1]`.
    pub(crate) fn map_clamped(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Self {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| f(p).map(|v| v.clamp(0.0, 1.0)))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Copy the `size`x`size` window anchored at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::from_raw_unchecked(w, h, pixels)
    }
}

/// A binary panel mask (1 = panel), stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTile {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl MaskTile {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(ImageryError::InvalidTile(format!(
                "expected {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(ImageryError::InvalidTile(format!(
                "mask value {bad} is not binary"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn foreground(&self) -> usize {
        self.labels.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.labels.len() as f64
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), width * height);
        Self {
            width,
            height,
            labels,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut labels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            labels.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::from_raw_unchecked(w, h, labels)
    }

    pub fn same_dims(&self, image: &ImageTile) -> bool {
        self.width == image.width && self.height == image.height
    }
}

/// Equally sized masks stacked item-major, the layout shared by losses and
/// metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl MaskBatch {
    pub fn from_tiles<'a>(tiles: impl IntoIterator<Item = &'a MaskTile>) -> Result<Self> {
        let mut batch = 0;
        let (mut width, mut height) = (0, 0);
        let mut labels = Vec::new();
        for t in tiles {
            if batch == 0 {
                (width, height) = (t.width, t.height);
            } else if (t.width, t.height) != (width, height) {
                return Err(ImageryError::InvalidTile(
                    "masks in a batch differ in size".into(),
                ));
            }
            labels.extend_from_slice(&t.labels);
            batch += 1;
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(ImageryError::InvalidTile(format!(
                "expected {} labels, got {}",
                batch * height * width,
                labels.len()
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(ImageryError::InvalidTile("mask batch is not binary".into()));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    pub fn item(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.labels[i * n..(i + 1) * n]
    }

    pub fn tile(&self, i: usize) -> MaskTile {
        MaskTile::from_raw_unchecked(self.width, self.height, self.item(i).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Split-aware index of image/mask pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub tile_size: usize,
    pub items: Vec<ManifestItem>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let known: BTreeMap<&str, &ManifestItem> =
            self.items.iter().map(|it| (it.id.as_str(), it)).collect();
        if known.len() != self.items.len() {
            return Err(ImageryError::Manifest("duplicate item id".into()));
        }
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.splits.get(split) {
                let item = known.get(id.as_str()).ok_or_else(|| {
                    ImageryError::Manifest(format!("{split} split names unknown id {id:?}"))
                })?;
                if !seen.insert(id.as_str()) {
                    return Err(ImageryError::Manifest(format!(
                        "id {id:?} appears in more than one split slot"
                    )));
                }
                if item.mask_path.is_none() && split != Split::Train {
                    return Err(ImageryError::Manifest(format!(
                        "unlabeled id {id:?} is only allowed in the train split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One window produced by [`tile_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct TileWindow {
    pub x: usize,
    pub y: usize,
    pub image: ImageTile,
    pub mask: Option<MaskTile>,
}

/// Window anchors along one axis: multiples of `stride`, plus a final window
/// pinned to the far edge when the strided ones stop short of it.
pub fn window_anchors(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut p = 0;
    while p + tile <= extent {
        anchors.push(p);
        p += stride;
    }
    match anchors.last() {
        Some(&last) if last + tile < extent => anchors.push(extent - tile),
        _ => {}
    }
    anchors
}

/// Cut an image (and its mask, with identical geometry) into square windows,
/// row-major from the top-left.
pub fn tile_image(
    image: &ImageTile,
    mask: Option<&MaskTile>,
    tile: usize,
    stride: usize,
) -> Result<Vec<TileWindow>> {
    if stride == 0 {
        return Err(ImageryError::ZeroStride);
    }
    if tile > image.width || tile > image.height || tile < MIN_TILE {
        return Err(ImageryError::TileTooLarge {
            tile,
            width: image.width,
            height: image.height,
        });
    }
    if let Some(m) = mask {
        if !m.same_dims(image) {
            return Err(ImageryError::InvalidTile(
                "mask and image dimensions differ".into(),
            ));
        }
    }
    let xs = window_anchors(image.width, tile, stride);
    let ys = window_anchors(image.height, tile, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(TileWindow {
                x,
                y,
                image: image.crop(x, y, tile, tile),
                mask: mask.map(|m| m.crop(x, y, tile, tile)),
            });
        }
    }
    Ok(out)
}

/// Number of ids kept for a fraction of `n`; tolerant of binary rounding so
/// that e.g. `0.7 * 10` keeps 7 rather than 8.
pub fn subset_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Keep a seeded random prefix of the train split. Every fraction uses the
/// same permutation for a given seed, so smaller subsets nest in larger ones.
pub fn subset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ImageryError::InvalidFraction(fraction));
    }
    if manifest.splits.train.is_empty() {
        return Err(ImageryError::EmptyTrainSplit);
    }
    let mut order = manifest.splits.train.clone();
    SplitMix64::derived(seed, &[tag::SUBSET]).shuffle(&mut order);
    order.truncate(subset_len(order.len(), fraction));
    let mut out = manifest.clone();
    out.splits.train = order;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> ImageTile {
        ImageTile::from_fn(w, h, |x, y| {
            [
                x as f32 / w as f32,
                y as f32 / h as f32,
                ((x + y) % 7) as f32 / 7.0,
            ]
        })
        .unwrap()
    }

    fn manifest_with(n: usize) -> DatasetManifest {
        let items: Vec<ManifestItem> = (0..n)
            .map(|i| ManifestItem {
                id: format!("t{i:03}"),
                image_path: format!("images/t{i:03}.png").into(),
                mask_path: Some(format!("masks/t{i:03}.png").into()),
            })
            .collect();
        DatasetManifest {
            name: "toy".into(),
            tile_size: 32,
            splits: Splits {
                train: items.iter().map(|it| it.id.clone()).collect(),
                ..Default::default()
            },
            items,
        }
    }

    #[test]
    fn tile_equal_to_image_yields_itself() {
        let img = gradient_image(32, 32);
        let tiles = tile_image(&img, None, 32, 32).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].image, img);
    }

    #[test]
    fn strided_tiles_anchor_on_stride() {
        let img = gradient_image(48, 32);
        let tiles = tile_image(&img, None, 32, 16).unwrap();
        let xs: Vec<usize> = tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0, 16]);
    }

    #[test]
    fn overrunning_window_is_pinned_to_edge() {
        let img = gradient_image(33, 32);
        let mask = MaskTile::zeros(33, 32);
        let tiles = tile_image(&img, Some(&mask), 32, 32).unwrap();
        let xs: Vec<usize> = tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0, 1]);
        assert_eq!(tiles[1].image.pixel(31, 0), img.pixel(32, 0));
        assert_eq!(tiles[1].mask.as_ref().unwrap().width(), 32);
    }

    #[test]
    fn oversized_tile_is_rejected() {
        let img = gradient_image(16, 16);
        assert!(matches!(
            tile_image(&img, None, 32, 8),
            Err(ImageryError::TileTooLarge { .. })
        ));
        assert!(matches!(
            tile_image(&img, None, 16, 0),
            Err(ImageryError::ZeroStride)
        ));
    }

    #[test]
    fn exact_partition_preserves_every_pixel() {
        let img = gradient_image(32, 16);
        let tiles = tile_image(&img, None, 8, 8).unwrap();
        assert_eq!(tiles.len(), 8);
        let mut covered = vec![0u8; 32 * 16];
        for t in &tiles {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(t.image.pixel(x, y), img.pixel(t.x + x, t.y + y));
                    covered[(t.y + y) * 32 + t.x + x] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn subset_sizes_and_repeatability() {
        let m = manifest_with(10);
        let a = subset(&m, 0.6, 5).unwrap();
        let b = subset(&m, 0.6, 5).unwrap();
        assert_eq!(a.splits.train.len(), 6);
        assert_eq!(a, b);
        assert_eq!(subset(&m, 0.7, 5).unwrap().splits.train.len(), 7);
    }

    #[test]
    fn full_subset_is_a_permutation() {
        let m = manifest_with(10);
        let full = subset(&m, 1.0, 2).unwrap();
        let mut ids = full.splits.train.clone();
        ids.sort();
        assert_eq!(ids, m.splits.train);
    }

    #[test]
    fn subsets_nest() {
        let m = manifest_with(37);
        let small = subset(&m, 0.6, 11).unwrap();
        let large = subset(&m, 0.8, 11).unwrap();
        for id in &small.splits.train {
            assert!(large.splits.train.contains(id));
        }
    }

    #[test]
    fn subset_rejects_bad_input() {
        let m = manifest_with(4);
        assert!(matches!(
            subset(&m, 0.0, 1),
            Err(ImageryError::InvalidFraction(_))
        ));
        assert!(matches!(
            subset(&m, 1.5, 1),
            Err(ImageryError::InvalidFraction(_))
        ));
        let empty = manifest_with(0);
        assert!(matches!(
            subset(&empty, 0.5, 1),
            Err(ImageryError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn manifest_validation_catches_overlap_and_unlabeled_eval_items() {
        let mut m = manifest_with(4);
        m.splits.val = vec!["t000".into()];
        assert!(m.validate().is_err());

        let mut m = manifest_with(4);
        m.items[3].mask_path = None;
        m.splits.train.retain(|id| id != "t003");
        m.splits.test = vec!["t003".into()];
        assert!(m.validate().is_err());

        let mut m = manifest_with(4);
        m.splits.test = vec!["nope".into()];
        assert!(m.validate().is_err());
    }

    #[test]
    fn tile_invariants_are_enforced() {
        assert!(ImageTile::new(4, 4, vec![[0.0; 3]; 16]).is_err());
        assert!(ImageTile::new(8, 8, vec![[1.5, 0.0, 0.0]; 64]).is_err());
        assert!(MaskTile::new(2, 2, vec![0, 1, 2, 0]).is_err());
    }
}
