//! Ablation matrix: named toggle sets trained under a shared seed set
//! and compared on test metrics.

use super::{dataset_hash, load_model, metrics_for_split, train};
use crate::config::{Toggles, TrainConfig};
use crate::data::{Dataset, Split};
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
}

/// The standard ablation rows: baseline, each module alone, each
/// disentanglement loss removed, interval weighting removed, full.
pub fn table1_matrix() -> Vec<AblationRow> {
    let base = Toggles::baseline();
    let full = Toggles::default();
    let only_msd = Toggles { msd: true, msd_modality: true, msd_reconstruct: true, msd_contrast: true, ..base };
    vec![
        AblationRow { name: "baseline".into(), toggles: base },
        AblationRow { name: "only MSD".into(), toggles: only_msd },
        AblationRow {
            name: "MSD w/o L_r".into(),
            toggles: Toggles { msd_reconstruct: false, ..only_msd },
        },
        AblationRow {
            name: "MSD w/o L_m".into(),
            toggles: Toggles { msd_modality: false, ..only_msd },
        },
        AblationRow {
            name: "MSD w/o L_c".into(),
            toggles: Toggles { msd_contrast: false, ..only_msd },
        },
        AblationRow {
            name: "only DPSR".into(),
            toggles: Toggles { dpsr: true, eta: true, ..base },
        },
        AblationRow {
            name: "DPSR w/o eta".into(),
            toggles: Toggles { dpsr: true, eta: false, ..base },
        },
        AblationRow {
            name: "only SAC".into(),
            toggles: Toggles { sac: true, ..base },
        },
        AblationRow { name: "full".into(), toggles: full },
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowResult {
    pub name: String,
    pub seed: u64,
    pub run_dir: String,
    pub test_metrics: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<RowResult>,
}

impl ComparisonTable {
    /// Mean of a numeric test metric over the seeds of a named row.
    pub fn mean_metric(&self, row_name: &str, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.name == row_name)
            .filter_map(|r| r.test_metrics.get(metric).and_then(|v| v.as_f64()))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Aligned-column text rendering for terminals.
    pub fn render_text(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        for row in &self.rows {
            if let Some(map) = row.test_metrics.as_object() {
                for (k, v) in map {
                    if v.is_number() && !keys.contains(k) {
                        keys.push(k.clone());
                    }
                }
            }
        }
        keys.sort();
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>6}", "setting", "seed"));
        for k in &keys {
            out.push_str(&format!(" {k:>12}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<16} {:>6}", row.name, row.seed));
            for k in &keys {
                match row.test_metrics.get(k).and_then(|v| v.as_f64()) {
                    Some(v) => out.push_str(&format!(" {v:>12.4}")),
                    None => out.push_str(&format!(" {:>12}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One training run per (row, seed) under `out_dir/<row>-seed<seed>`,
/// then test metrics from the best checkpoint of each.
///
/// Rows are independent; they run on a small thread pool with isolated
/// artifact directories, and per-run results do not depend on the
/// parallelism.
pub fn run_matrix(
    base: &TrainConfig,
    dataset_manifest_path: &Path,
    matrix: &[AblationRow],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<ComparisonTable> {
    if matrix.is_empty() || seeds.is_empty() {
        return Err(CosaError::Config("ablation needs rows and seeds".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CosaError::io(out_dir.display().to_string(), e))?;
    let _ = dataset_hash(dataset_manifest_path)?;

    let mut jobs: Vec<(AblationRow, u64)> = Vec::new();
    for row in matrix {
        for &seed in seeds {
            jobs.push((row.clone(), seed));
        }
    }

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let jobs = std::sync::Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new(Vec::<(usize, Result<RowResult>)>::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = { jobs.lock().unwrap().pop() };
                let Some((order, (row, seed))) = job else { break };
                let result = run_single(base, dataset_manifest_path, &row, seed, out_dir);
                results.lock().unwrap().push((order, result));
            });
        }
    });

    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(order, _)| *order);
    let mut rows = Vec::new();
    for (_, r) in collected {
        rows.push(r?);
    }
    Ok(ComparisonTable { rows })
}

fn slugify(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

fn run_single(
    base: &TrainConfig,
    dataset_manifest_path: &Path,
    row: &AblationRow,
    seed: u64,
    out_dir: &Path,
) -> Result<RowResult> {
    let mut cfg = base.clone();
    cfg.modules = row.toggles;
    cfg.seed = seed;
    let run_dir = out_dir.join(format!("{}-seed{}", slugify(&row.name), seed));
    let dataset = Dataset::load(dataset_manifest_path)?;
    train(&cfg, &dataset, dataset_manifest_path, &run_dir, None)?;
    let (_, model) = load_model(&run_dir, &dataset, "best")?;
    let test_metrics = metrics_for_split(&model, &dataset, Split::Test)?;
    Ok(RowResult {
        name: row.name.clone(),
        seed,
        run_dir: run_dir.display().to_string(),
        test_metrics,
    })
}
