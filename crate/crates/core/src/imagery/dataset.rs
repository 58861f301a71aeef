//! On-disk datasets.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/manifest.json      {"name", "tile_size", "splits": {"train", "val", "test"}}
//! root/images/<id>.png    8-bit RGB
//! root/masks/<id>.png     8-bit grayscale, 0 = background, 255 = panel (optional)
//! ```
//!
//! Images larger than `tile_size` are cut into edge-anchored windows with
//! stride `tile_size`; window ids are `<id>@<x>_<y>` and inherit the split of
//! their source image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    tile_image, DatasetManifest, ImageTile, ImageryError, ManifestItem, MaskTile, Result, Split,
    Splits,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTile,
    pub mask: Option<MaskTile>,
}

/// A manifest together with the decoded tiles it refers to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    samples: Arc<BTreeMap<String, Sample>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    name: String,
    tile_size: usize,
    splits: Splits,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, samples: BTreeMap<String, Sample>) -> Result<Self> {
        manifest.validate()?;
        for item in &manifest.items {
            let sample = samples.get(&item.id).ok_or_else(|| {
                ImageryError::Manifest(format!("no decoded sample for id {:?}", item.id))
            })?;
            if sample.image.width() != manifest.tile_size
                || sample.image.height() != manifest.tile_size
            {
                return Err(ImageryError::Manifest(format!(
                    "sample {:?} is not {1}x{1}",
                    item.id, manifest.tile_size
                )));
            }
            if sample.mask.is_some() != item.mask_path.is_some() {
                return Err(ImageryError::Manifest(format!(
                    "mask presence of {:?} disagrees with the manifest",
                    item.id
                )));
            }
            if let Some(m) = &sample.mask {
                if !m.same_dims(&sample.image) {
                    return Err(ImageryError::DimensionMismatch {
                        path: item.image_path.clone(),
                        image_w: sample.image.width(),
                        image_h: sample.image.height(),
                        mask_w: m.width(),
                        mask_h: m.height(),
                    });
                }
            }
        }
        Ok(Self {
            manifest,
            samples: Arc::new(samples),
        })
    }

    /// Build an in-memory dataset from labelled tiles given split by split.
    pub fn from_splits(
        name: &str,
        tile_size: usize,
        splits: [(Split, Vec<(String, Sample)>); 3],
    ) -> Result<Self> {
        let mut items = Vec::new();
        let mut manifest_splits = Splits::default();
        let mut samples = BTreeMap::new();
        for (split, entries) in splits {
            for (id, sample) in entries {
                items.push(ManifestItem {
                    id: id.clone(),
                    image_path: PathBuf::from(format!("images/{id}.png")),
                    mask_path: sample
                        .mask
                        .as_ref()
                        .map(|_| PathBuf::from(format!("masks/{id}.png"))),
                });
                match split {
                    Split::Train => manifest_splits.train.push(id.clone()),
                    Split::Val => manifest_splits.val.push(id.clone()),
                    Split::Test => manifest_splits.test.push(id.clone()),
                }
                samples.insert(id, sample);
            }
        }
        Self::new(
            DatasetManifest {
                name: name.to_string(),
                tile_size,
                items,
                splits: manifest_splits,
            },
            samples,
        )
    }

    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(ImageryError::MissingDirectory(root.to_path_buf()));
        }
        let images_dir = root.join("images");
        if !images_dir.is_dir() {
            return Err(ImageryError::MissingDirectory(images_dir));
        }
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| unreadable(&manifest_path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| unreadable(&manifest_path, e))?;

        let mut stems = Vec::new();
        for entry in fs::read_dir(&images_dir).map_err(|e| unreadable(&images_dir, e))? {
            let path = entry.map_err(|e| unreadable(&images_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();

        let tile = file.tile_size;
        let mut items = Vec::new();
        let mut samples = BTreeMap::new();
        let mut expansion: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for stem in &stems {
            let image_path = images_dir.join(format!("{stem}.png"));
            let mask_path = root.join("masks").join(format!("{stem}.png"));
            let image = read_image(&image_path)?;
            let mask = if mask_path.is_file() {
                let m = read_mask(&mask_path)?;
                if !m.same_dims(&image) {
                    return Err(ImageryError::DimensionMismatch {
                        path: mask_path,
                        image_w: image.width(),
                        image_h: image.height(),
                        mask_w: m.width(),
                        mask_h: m.height(),
                    });
                }
                Some(m)
            } else {
                None
            };
            let mask_path = mask.as_ref().map(|_| mask_path);
            let ids = if image.width() == tile && image.height() == tile {
                items.push(ManifestItem {
                    id: stem.clone(),
                    image_path: image_path.clone(),
                    mask_path: mask_path.clone(),
                });
                samples.insert(stem.clone(), Sample { image, mask });
                vec![stem.clone()]
            } else {
                let windows = tile_image(&image, mask.as_ref(), tile, tile)?;
                let mut ids = Vec::with_capacity(windows.len());
                for w in windows {
                    let id = format!("{stem}@{}_{}", w.x, w.y);
                    items.push(ManifestItem {
                        id: id.clone(),
                        image_path: image_path.clone(),
                        mask_path: mask_path.clone(),
                    });
                    samples.insert(
                        id.clone(),
                        Sample {
                            image: w.image,
                            mask: w.mask,
                        },
                    );
                    ids.push(id);
                }
                ids
            };
            expansion.insert(stem.clone(), ids);
        }

        let expand = |ids: &[String]| -> Result<Vec<String>> {
            let mut out = Vec::new();
            for id in ids {
                let tiles = expansion.get(id).ok_or_else(|| {
                    ImageryError::Manifest(format!(
                        "{} lists {id:?} but images/{id}.png does not exist",
                        manifest_path.display()
                    ))
                })?;
                out.extend(tiles.iter().cloned());
            }
            Ok(out)
        };
        let splits = Splits {
            train: expand(&file.splits.train)?,
            val: expand(&file.splits.val)?,
            test: expand(&file.splits.test)?,
        };
        Self::new(
            DatasetManifest {
                name: file.name,
                tile_size: tile,
                items,
                splits,
            },
            samples,
        )
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest.splits.get(split)
    }

    /// Same tiles, different manifest (e.g. a train subset).
    pub fn with_manifest(&self, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        for item in &manifest.items {
            if !self.samples.contains_key(&item.id) {
                return Err(ImageryError::Manifest(format!("unknown id {:?}", item.id)));
            }
        }
        Ok(Self {
            manifest,
            samples: Arc::clone(&self.samples),
        })
    }

    /// Replace the masks of the given ids, e.g. with corrupted labels.
    pub fn with_masks(&self, replacements: BTreeMap<String, MaskTile>) -> Result<Self> {
        let mut samples = (*self.samples).clone();
        for (id, mask) in replacements {
            let sample = samples
                .get_mut(&id)
                .ok_or_else(|| ImageryError::Manifest(format!("unknown id {id:?}")))?;
            if !mask.same_dims(&sample.image) || sample.mask.is_none() {
                return Err(ImageryError::Manifest(format!(
                    "cannot replace mask of {id:?}"
                )));
            }
            sample.mask = Some(mask);
        }
        Self::new(self.manifest.clone(), samples)
    }
}

/// Validate a dataset root and return its manifest.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    Dataset::load(root).map(|d| d.manifest)
}

/// Write `dataset` under `root` in the layout [`Dataset::load`] reads.
/// `extra_masks` adds a further directory of masks (e.g. `masks_clean`).
pub fn write_dataset(
    root: &Path,
    dataset: &Dataset,
    extra_masks: Option<(&str, &BTreeMap<String, MaskTile>)>,
) -> Result<()> {
    let mkdir = |p: PathBuf| fs::create_dir_all(&p).map_err(|e| unwritable(&p, e));
    mkdir(root.join("images"))?;
    mkdir(root.join("masks"))?;
    if let Some((dir, _)) = extra_masks {
        mkdir(root.join(dir))?;
    }
    for item in &dataset.manifest.items {
        let sample = &dataset.samples[&item.id];
        write_image(
            &root.join("images").join(format!("{}.png", item.id)),
            &sample.image,
        )?;
        if let Some(mask) = &sample.mask {
            write_mask(&root.join("masks").join(format!("{}.png", item.id)), mask)?;
        }
        if let Some((dir, masks)) = extra_masks {
            if let Some(mask) = masks.get(&item.id) {
                write_mask(&root.join(dir).join(format!("{}.png", item.id)), mask)?;
            }
        }
    }
    let file = ManifestFile {
        name: dataset.manifest.name.clone(),
        tile_size: dataset.manifest.tile_size,
        splits: dataset.manifest.splits.clone(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| unwritable(&path, e))?;
    fs::write(&path, text).map_err(|e| unwritable(&path, e))
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> ImageryError {
    ImageryError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn unwritable(path: &Path, e: impl std::fmt::Display) -> ImageryError {
    ImageryError::Unwritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<ImageTile> {
    let img = image::open(path)
        .map_err(|e| unreadable(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| p.0.map(|v| v as f32 / 255.0))
        .collect();
    ImageTile::new(w, h, pixels).map_err(|e| unreadable(path, e))
}

pub fn read_mask(path: &Path) -> Result<MaskTile> {
    let img = image::open(path)
        .map_err(|e| unreadable(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = Vec::with_capacity(w * h);
    for p in img.pixels() {
        match p.0[0] {
            0 => labels.push(0),
            255 => labels.push(1),
            value => {
                return Err(ImageryError::NonBinaryMask {
                    path: path.to_path_buf(),
                    value,
                })
            }
        }
    }
    Ok(MaskTile::from_raw_unchecked(w, h, labels))
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &ImageTile) -> Result<()> {
    let bytes: Vec<u8> = image.pixels().iter().flat_map(|p| p.map(to_u8)).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| unwritable(path, e))
}

pub fn write_mask(path: &Path, mask: &MaskTile) -> Result<()> {
    let bytes: Vec<u8> = mask.labels().iter().map(|&v| v * 255).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| unwritable(path, e))
}
