use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataSource, Result};
use crate::imagery::{
    corrupt_mask, generate_scene, CorruptionSpec, Dataset, ImageryError, Sample, SceneSpec, Split,
};
use crate::rng::{derive, tag};

/// A procedurally generated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub scene: SceneSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Extra mask-less train items, usable only for pretraining.
    #[serde(default)]
    pub unlabeled: usize,
    #[serde(default)]
    pub seed: u64,
    /// Applied to train and val labels when materialized by `gen-data`.
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> std::result::Result<(), ImageryError> {
        self.scene.validate()?;
        if self.train == 0 {
            return Err(ImageryError::EmptyTrainSplit);
        }
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        Ok(())
    }
}

fn split_code(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Clean tiles for every split. Item `i` of split `s` is rendered from
/// `derive(seed, [DATASET, s, i])`, so a domain never depends on its sizes.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    seed: u64,
) -> std::result::Result<Dataset, ImageryError> {
    spec.validate()?;
    let render = |split: Split, prefix: &str, count: usize, offset: usize, labelled: bool| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let k = (offset + i) as u64;
                let (image, mask) = generate_scene(
                    &spec.scene,
                    derive(seed, &[tag::DATASET, split_code(split), k]),
                )?;
                let mask = labelled.then_some(mask);
                Ok((format!("{prefix}_{i:04}"), Sample { image, mask }))
            })
            .collect::<std::result::Result<Vec<_>, ImageryError>>()
    };
    let mut train = render(Split::Train, "train", spec.train, 0, true)?;
    train.extend(render(
        Split::Train,
        "unlabeled",
        spec.unlabeled,
        spec.train,
        false,
    )?);
    Dataset::from_splits(
        &spec.name,
        spec.scene.tile_size,
        [
            (Split::Train, train),
            (Split::Val, render(Split::Val, "val", spec.val, 0, true)?),
            (
                Split::Test,
                render(Split::Test, "test", spec.test, 0, true)?,
            ),
        ],
    )
}

/// Replace the labels of the train and val splits with corrupted copies;
/// test labels stay clean. Item `i` of the manifest uses
/// `derive(seed, [CORRUPT, i])`.
pub fn corrupt_labels(
    dataset: &Dataset,
    spec: &CorruptionSpec,
    seed: u64,
) -> std::result::Result<Dataset, ImageryError> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(dataset.clone());
    }
    let positions: BTreeMap<&str, usize> = dataset
        .manifest
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id.as_str(), i))
        .collect();
    let ids: Vec<&String> = dataset
        .ids(Split::Train)
        .iter()
        .chain(dataset.ids(Split::Val))
        .collect();
    let replaced = ids
        .par_iter()
        .filter_map(|id| {
            let mask = dataset.sample(id)?.mask.as_ref()?;
            let item_seed = derive(seed, &[tag::CORRUPT, positions[id.as_str()] as u64]);
            Some(corrupt_mask(mask, spec, item_seed).map(|m| ((*id).clone(), m)))
        })
        .collect::<std::result::Result<BTreeMap<_, _>, _>>()?;
    dataset.with_masks(replaced)
}

/// Materialize a domain in memory.
pub fn load_source(source: &DataSource) -> Result<Dataset> {
    Ok(match source {
        DataSource::Synthetic(s) => generate_dataset(s, s.seed)?,
        DataSource::Path { root, .. } => Dataset::load(Path::new(root))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::Domain;

    pub(crate) fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            name: "a".into(),
            scene: SceneSpec {
                tile_size: 16,
                panel_rows: [1, 2],
                panel_cols: [1, 3],
                panel_fill: [0.15, 0.35],
                background: Domain::Rooftop,
                noise_level: 0.03,
            },
            train: 6,
            val: 2,
            test: 3,
            unlabeled: 2,
            seed: 4,
            corruption: None,
        }
    }

    #[test]
    fn splits_and_labels() {
        let ds = generate_dataset(&small_spec(), 4).unwrap();
        assert_eq!(ds.ids(Split::Train).len(), 8);
        assert_eq!(ds.ids(Split::Test).len(), 3);
        assert!(ds.sample("unlabeled_0001").unwrap().mask.is_none());
        assert!(ds.sample("train_0005").unwrap().mask.is_some());
    }

    #[test]
    fn generation_is_deterministic_and_size_independent() {
        let a = generate_dataset(&small_spec(), 4).unwrap();
        let mut bigger = small_spec();
        bigger.train = 9;
        let b = generate_dataset(&bigger, 4).unwrap();
        for id in a.ids(Split::Test) {
            assert_eq!(a.sample(id), b.sample(id));
        }
        assert_eq!(a.sample("train_0003"), b.sample("train_0003"));
    }

    #[test]
    fn corruption_spares_test_labels() {
        let ds = generate_dataset(&small_spec(), 4).unwrap();
        let c = corrupt_labels(
            &ds,
            &CorruptionSpec {
                drop_rate: 1.0,
                erode_px: 0,
            },
            0,
        )
        .unwrap();
        for id in c.ids(Split::Train).iter().chain(c.ids(Split::Val)) {
            if let Some(m) = &c.sample(id).unwrap().mask {
                assert_eq!(m.foreground(), 0);
            }
        }
        for id in c.ids(Split::Test) {
            assert_eq!(c.sample(id), ds.sample(id));
        }
    }
}
