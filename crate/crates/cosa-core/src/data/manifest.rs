//! Dataset manifest: a JSON document naming the tensor packs of each
//! split and their declared shapes.

use super::TaskKind;
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Files of one split, relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitFiles {
    pub visual: String,
    pub acoustic: String,
    pub text: String,
    pub labels: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitInfo {
    pub size: usize,
    pub files: SplitFiles,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskKind,
    /// Modality feature widths `[d_v, d_a, d_t]`.
    pub dims: [usize; 3],
    /// Frames per sample.
    pub seq_len: usize,
    /// Emotion classes; required for MER, absent for MSA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    pub train: SplitInfo,
    pub valid: SplitInfo,
    pub test: SplitInfo,
    /// Hash of the generator config for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_hash: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.seq_len == 0 {
            return Err(CosaError::Config(
                "manifest dims and seq_len must be positive".into(),
            ));
        }
        match self.task {
            TaskKind::Mer => {
                if self.class_count.map_or(true, |c| c < 2) {
                    return Err(CosaError::Config(
                        "MER manifest needs class_count >= 2".into(),
                    ));
                }
            }
            TaskKind::Msa => {}
        }
        for (name, split) in self.splits() {
            if split.size == 0 {
                return Err(CosaError::Config(format!("{name} split is empty")));
            }
        }
        Ok(())
    }

    pub fn splits(&self) -> [(&'static str, &SplitInfo); 3] {
        [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CosaError::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CosaError::io(path.display().to_string(), e))
    }

    /// Resolve a split file reference against the manifest location.
    pub fn resolve(manifest_path: &Path, file: &str) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest() -> DatasetManifest {
        let files = |s: &str| SplitFiles {
            visual: format!("{s}_v.csat"),
            acoustic: format!("{s}_a.csat"),
            text: format!("{s}_t.csat"),
            labels: format!("{s}_y.csat"),
        };
        DatasetManifest {
            task: TaskKind::Msa,
            dims: [16, 16, 32],
            seq_len: 20,
            class_count: None,
            train: SplitInfo { size: 10, files: files("train") },
            valid: SplitInfo { size: 5, files: files("valid") },
            test: SplitInfo { size: 5, files: files("test") },
            generator_hash: None,
        }
    }

    #[test]
    fn json_round_trip_preserves_manifest() {
        let m = toy_manifest();
        let text = serde_json::to_string(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn mer_without_class_count_is_invalid() {
        let mut m = toy_manifest();
        m.task = TaskKind::Mer;
        assert!(m.validate().is_err());
        m.class_count = Some(4);
        assert!(m.validate().is_ok());
    }
}
