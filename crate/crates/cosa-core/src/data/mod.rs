//! Data model for aligned multimodal sequences: tensor packs, dataset
//! manifests, a controllable synthetic generator, and batch loading.

mod loader;
mod manifest;
mod pack;
mod synthetic;

pub use loader::{BatchIter, Dataset, Split, SplitData};
pub use manifest::{DatasetManifest, SplitFiles, SplitInfo};
pub use pack::{read_pack, write_pack};
pub use synthetic::{generate_synthetic, LabelParams, SyntheticSpec};

use crate::tensor::Tensor;
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};

/// The three input channels. Modality label indices are fixed:
/// visual 0, acoustic 1, text 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityId {
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "A")]
    Acoustic,
    #[serde(rename = "T")]
    Text,
}

pub const MODALITIES: [ModalityId; 3] = [ModalityId::Visual, ModalityId::Acoustic, ModalityId::Text];

impl ModalityId {
    pub fn index(self) -> usize {
        match self {
            ModalityId::Visual => 0,
            ModalityId::Acoustic => 1,
            ModalityId::Text => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ModalityId::Visual => "V",
            ModalityId::Acoustic => "A",
            ModalityId::Text => "T",
        }
    }

    pub fn parse_set(s: &str) -> Result<Vec<ModalityId>> {
        let mut set = Vec::new();
        for ch in s.chars() {
            let m = match ch.to_ascii_uppercase() {
                'V' => ModalityId::Visual,
                'A' => ModalityId::Acoustic,
                'T' => ModalityId::Text,
                other => {
                    return Err(CosaError::Config(format!(
                        "unknown modality '{other}' in '{s}' (use V, A, T)"
                    )))
                }
            };
            if !set.contains(&m) {
                set.push(m);
            }
        }
        if set.is_empty() {
            return Err(CosaError::Config("modality set must be non-empty".into()));
        }
        Ok(set)
    }
}

impl std::fmt::Display for ModalityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// Task the labels belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Sentiment regression: scalar labels in `[-3, 3]`.
    Msa,
    /// Emotion recognition: class indices in `[0, C)`.
    Mer,
}

/// Per-sample supervision.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Msa(Vec<f32>),
    Mer(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Msa(v) => v.len(),
            Labels::Mer(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Labels::Msa(_) => TaskKind::Msa,
            Labels::Mer(_) => TaskKind::Mer,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Msa(v) => Labels::Msa(idx.iter().map(|&i| v[i]).collect()),
            Labels::Mer(v) => Labels::Mer(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Aligned per-modality sequence tensors plus labels; the unit of all
/// processing. Each modality tensor has shape `[B, T, d_i]`.
#[derive(Clone, Debug)]
pub struct MultimodalBatch {
    pub features: [Tensor<f32>; 3],
    pub active: [bool; 3],
    pub labels: Labels,
    pub ids: Vec<String>,
}

impl MultimodalBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        let t = self.seq_len();
        for m in MODALITIES {
            let shape = self.features[m.index()].shape();
            if shape.len() != 3 || shape[0] != b || shape[1] != t {
                return Err(CosaError::Shape(format!(
                    "modality {m} has shape {shape:?}, expected [{b}, {t}, d]"
                )));
            }
        }
        if self.labels.len() != b || self.ids.len() != b {
            return Err(CosaError::Shape(format!(
                "batch of {b} samples has {} labels and {} ids",
                self.labels.len(),
                self.ids.len()
            )));
        }
        match &self.labels {
            Labels::Msa(v) => {
                if v.iter().any(|&y| !(-3.0..=3.0).contains(&y)) {
                    return Err(CosaError::Config("MSA labels must lie in [-3, 3]".into()));
                }
            }
            Labels::Mer(_) => {}
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.features[0].shape()[1]
    }

    pub fn active_modalities(&self) -> Vec<ModalityId> {
        MODALITIES
            .into_iter()
            .filter(|m| self.active[m.index()])
            .collect()
    }
}

/// Restrict a batch to a modality subset: excluded modalities are
/// replaced by zero tensors and flagged inactive so downstream fusion
/// skips them.
pub fn subset_modalities(batch: &MultimodalBatch, keep: &[ModalityId]) -> Result<MultimodalBatch> {
    if keep.is_empty() {
        return Err(CosaError::Config("modality subset must be non-empty".into()));
    }
    let mut out = batch.clone();
    for m in MODALITIES {
        let keep_m = keep.contains(&m);
        if !keep_m {
            out.features[m.index()] = Tensor::zeros(batch.features[m.index()].shape());
        }
        out.active[m.index()] = keep_m && batch.active[m.index()];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch() -> MultimodalBatch {
        MultimodalBatch {
            features: [
                Tensor::from_fn(&[2, 3, 4], |i| i as f32),
                Tensor::from_fn(&[2, 3, 4], |i| -(i as f32)),
                Tensor::from_fn(&[2, 3, 5], |i| 0.5 * i as f32),
            ],
            active: [true, true, true],
            labels: Labels::Msa(vec![1.0, -2.0]),
            ids: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn full_subset_is_identity() {
        let b = toy_batch();
        let s = subset_modalities(&b, &MODALITIES).unwrap();
        assert_eq!(s.features[0], b.features[0]);
        assert_eq!(s.active, [true, true, true]);
    }

    #[test]
    fn text_only_zeroes_and_deactivates_others() {
        let b = toy_batch();
        let s = subset_modalities(&b, &[ModalityId::Text]).unwrap();
        assert!(s.features[0].data().iter().all(|&v| v == 0.0));
        assert!(s.features[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(s.features[2], b.features[2]);
        assert_eq!(s.active, [false, false, true]);
    }

    #[test]
    fn empty_subset_is_rejected() {
        let b = toy_batch();
        assert!(subset_modalities(&b, &[]).is_err());
        assert!(ModalityId::parse_set("").is_err());
    }

    #[test]
    fn parse_set_accepts_any_order_and_case() {
        let set = ModalityId::parse_set("tv").unwrap();
        assert_eq!(set, vec![ModalityId::Text, ModalityId::Visual]);
    }

    #[test]
    fn msa_label_bounds_are_enforced() {
        let mut b = toy_batch();
        b.labels = Labels::Msa(vec![1.0, 3.5]);
        assert!(b.validate().is_err());
    }
}
