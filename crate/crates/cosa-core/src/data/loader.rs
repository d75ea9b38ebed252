//! Loading datasets from manifests and iterating batches.

use super::manifest::DatasetManifest;
use super::pack::read_pack;
use super::{Labels, MultimodalBatch, TaskKind};
use crate::params::stream_seed;
use crate::tensor::Tensor;
use crate::{CosaError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(CosaError::Config(format!(
                "unknown split '{other}' (use train, valid, test)"
            ))),
        }
    }
}

/// One fully loaded split, read-only after open.
pub struct SplitData {
    pub features: [Tensor<f32>; 3],
    pub labels: Labels,
    pub ids: Vec<String>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.features[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materialize selected samples as a batch.
    pub fn gather(&self, idx: &[usize]) -> MultimodalBatch {
        let features = [0, 1, 2].map(|m| {
            let shape = self.features[m].shape();
            let (t, d) = (shape[1], shape[2]);
            let src = self.features[m].data();
            let mut data = Vec::with_capacity(idx.len() * t * d);
            for &i in idx {
                data.extend_from_slice(&src[i * t * d..(i + 1) * t * d]);
            }
            Tensor::new(vec![idx.len(), t, d], data).expect("gather shape")
        });
        MultimodalBatch {
            features,
            active: [true, true, true],
            labels: self.labels.select(idx),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    train: SplitData,
    valid: SplitData,
    test: SplitData,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let mut splits = Vec::new();
        for (name, info) in manifest.splits() {
            let refs = [
                &info.files.visual,
                &info.files.acoustic,
                &info.files.text,
            ];
            let mut features = Vec::new();
            for (m, file) in refs.into_iter().enumerate() {
                let path = DatasetManifest::resolve(manifest_path, file);
                let tensor = read_pack(&path)?;
                let expect = [info.size, manifest.seq_len, manifest.dims[m]];
                if tensor.shape() != expect {
                    return Err(CosaError::Shape(format!(
                        "{}: shape {:?} does not match manifest {:?}",
                        path.display(),
                        tensor.shape(),
                        expect
                    )));
                }
                features.push(tensor);
            }
            let labels_path = DatasetManifest::resolve(manifest_path, &info.files.labels);
            let raw = read_pack(&labels_path)?;
            if raw.shape() != [info.size] {
                return Err(CosaError::Shape(format!(
                    "{}: labels shape {:?} does not match split size {}",
                    labels_path.display(),
                    raw.shape(),
                    info.size
                )));
            }
            let labels = match manifest.task {
                TaskKind::Msa => {
                    if raw.data().iter().any(|&y| !(-3.0..=3.0).contains(&y)) {
                        return Err(CosaError::Config(format!(
                            "{}: MSA labels must lie in [-3, 3]",
                            labels_path.display()
                        )));
                    }
                    Labels::Msa(raw.data().to_vec())
                }
                TaskKind::Mer => {
                    let classes = manifest.class_count.unwrap_or(0);
                    let mut idx = Vec::with_capacity(raw.len());
                    for &v in raw.data() {
                        let i = v as usize;
                        if v < 0.0 || v.fract() != 0.0 || i >= classes {
                            return Err(CosaError::Config(format!(
                                "{}: MER label {v} outside [0, {classes})",
                                labels_path.display()
                            )));
                        }
                        idx.push(i);
                    }
                    Labels::Mer(idx)
                }
            };
            let ids = (0..info.size).map(|i| format!("{name}-{i:05}")).collect();
            splits.push(SplitData {
                features: [
                    features.remove(0),
                    features.remove(0),
                    features.remove(0),
                ],
                labels,
                ids,
            });
        }
        let test = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            manifest,
            train,
            valid,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Batches of one split. Train order is a `(seed, epoch)`-determined
    /// shuffle; valid/test keep file order. The final short batch is kept.
    pub fn batches(&self, split: Split, batch_size: usize, shuffle: Option<(u64, u64)>) -> BatchIter<'_> {
        let data = self.split(split);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if let Some((seed, epoch)) = shuffle {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("shuffle.epoch{epoch}")));
            order.shuffle(&mut rng);
        }
        BatchIter {
            data,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

pub struct BatchIter<'a> {
    data: &'a SplitData,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = MultimodalBatch;

    fn next(&mut self) -> Option<MultimodalBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn toy_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train_size: 23,
            valid_size: 7,
            test_size: 9,
            seq_len: 5,
            dims: [6, 6, 8],
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&dir.path().join("manifest.json")).unwrap();
        (dir, ds)
    }

    #[test]
    fn batch_iteration_keeps_last_short_batch() {
        let (_dir, ds) = toy_dataset();
        let batches: Vec<_> = ds.batches(Split::Train, 10, Some((1, 0))).collect();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].len(), 10);
        assert_eq!(batches[2].len(), 3);
        for b in &batches {
            b.validate().unwrap();
        }
    }

    #[test]
    fn oversized_batch_yields_single_batch() {
        let (_dir, ds) = toy_dataset();
        let batches: Vec<_> = ds.batches(Split::Valid, 100, None).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 7);
    }

    #[test]
    fn shuffle_is_seed_and_epoch_determined() {
        let (_dir, ds) = toy_dataset();
        let ids = |seed, epoch| {
            ds.batches(Split::Train, 23, Some((seed, epoch)))
                .next()
                .unwrap()
                .ids
        };
        assert_eq!(ids(1, 0), ids(1, 0));
        assert_ne!(ids(1, 0), ids(1, 1));
        assert_ne!(ids(1, 0), ids(2, 0));
        // Fixed order without shuffling.
        let fixed: Vec<_> = ds.batches(Split::Test, 4, None).flat_map(|b| b.ids).collect();
        assert_eq!(fixed[0], "test-00000");
        assert_eq!(fixed[8], "test-00008");
    }

    #[test]
    fn shape_mismatch_against_manifest_is_reported() {
        let (dir, _ds) = toy_dataset();
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest = DatasetManifest::load(&manifest_path).unwrap();
        manifest.dims = [7, 6, 8];
        manifest.save(&manifest_path).unwrap();
        let err = Dataset::load(&manifest_path).err().unwrap().to_string();
        assert!(err.contains("does not match manifest"), "got: {err}");
    }
}
