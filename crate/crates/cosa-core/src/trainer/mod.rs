//! Training harness: alternating prediction / actor-critic optimization,
//! learning-rate scheduling, checkpointing, metrics logs, and the
//! ablation matrix.

mod ablate;
mod adam;
mod state;

pub use ablate::{run_matrix, table1_matrix, AblationRow, ComparisonTable, RowResult};
pub use adam::Adam;
pub use state::{FullState, PendingRecord, TrainerMeta};

use crate::agents::{self, ReplayMemory, ReplayRecord};
use crate::config::TrainConfig;
use crate::params::stream_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::data::{subset_modalities, Dataset, Labels, ModalityId, MultimodalBatch, Split, TaskKind};
use crate::eval::{metrics_mer, metrics_msa, MsaMetricOptions};
use crate::model::CosaModel;
use crate::tape::{ParamMode, Tape};
use crate::tensor::Tensor;
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct LossRow {
    pub total: f64,
    pub prediction: f64,
    pub msd: f64,
    pub msd_modality: f64,
    pub msd_reconstruct: f64,
    pub msd_contrast: f64,
    pub dpsr: f64,
    pub actor: f64,
    pub critic: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub lr: f64,
    pub train: LossRow,
    pub valid: LossRow,
    pub valid_metrics: serde_json::Value,
    /// Held-out modality-classifier accuracy on modality features.
    pub msd_probe_acc: f64,
    /// Held-out mean distance between sentiment and modality features.
    pub msd_probe_dist: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub epochs_completed: u32,
    pub best_valid: f64,
    pub best_epoch: u32,
    pub config_hash: String,
}

/// Inputs manifest written before any other artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_hash: String,
    pub code_version: String,
    /// Wall-clock field; excluded from reproducibility comparisons.
    pub started_at: String,
}

pub fn dataset_hash(manifest_path: &Path) -> Result<String> {
    let bytes = std::fs::read(manifest_path)
        .map_err(|e| CosaError::io(manifest_path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Batches of a split with the configured modality subset applied.
pub fn prepared_batches(
    dataset: &Dataset,
    split: Split,
    cfg: &TrainConfig,
    shuffle: Option<(u64, u64)>,
) -> Result<Vec<MultimodalBatch>> {
    let subset = ModalityId::parse_set(&cfg.modalities)?;
    let full = subset.len() == 3;
    dataset
        .batches(split, cfg.batch_size, shuffle)
        .map(|b| if full { Ok(b) } else { subset_modalities(&b, &subset) })
        .collect()
}

struct EpochAccumulator {
    sums: LossRow,
    samples: usize,
    agent_updates: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            sums: LossRow::default(),
            samples: 0,
            agent_updates: 0,
        }
    }

    fn finish(mut self) -> LossRow {
        let n = self.samples.max(1) as f64;
        self.sums.total /= n;
        self.sums.prediction /= n;
        self.sums.msd /= n;
        self.sums.msd_modality /= n;
        self.sums.msd_reconstruct /= n;
        self.sums.msd_contrast /= n;
        self.sums.dpsr /= n;
        let u = self.agent_updates.max(1) as f64;
        self.sums.actor /= u;
        self.sums.critic /= u;
        self.sums
    }
}

/// Scale each modality's next-batch features by the stored actions:
/// the transition the agents experience between batches.
fn scaled_next_state(features: &[Tensor<f32>; 3], actions: &[Tensor<f32>; 3]) -> [Tensor<f32>; 3] {
    [0, 1, 2].map(|i| {
        let shape = features[i].shape().to_vec();
        let h = shape[2];
        let mut out = features[i].clone();
        for (bt, chunk) in out.data_mut().chunks_mut(h).enumerate() {
            let w = actions[i].data()[bt];
            for v in chunk {
                *v *= w;
            }
        }
        out
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CosaModel,
    adam: Adam,
    replay: ReplayMemory,
    pending: Option<PendingRecord>,
    explore_rng: ChaCha8Rng,
    lr: f64,
    stall_epochs: u32,
    best_valid: f64,
    best_epoch: u32,
    start_epoch: u32,
}

/// Standard normal via Box-Muller, one value per call.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.task != dataset.manifest.task {
            return Err(CosaError::Config(format!(
                "config task {:?} does not match dataset task {:?}",
                cfg.task, dataset.manifest.task
            )));
        }
        let classes = dataset.manifest.class_count.unwrap_or(0);
        let model = CosaModel::init(cfg, dataset.manifest.dims, classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            adam: Adam::new(),
            replay: ReplayMemory::new(cfg.replay_capacity, cfg.seed),
            pending: None,
            explore_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "explore")),
            lr: cfg.learning_rate,
            stall_epochs: 0,
            best_valid: f64::INFINITY,
            best_epoch: 0,
            start_epoch: 0,
        })
    }

    /// Prediction-phase update on one batch.
    fn phase_a(&mut self, batch: &MultimodalBatch, acc: &mut EpochAccumulator) -> Result<()> {
        for store in self.model.prediction_stores_mut() {
            store.zero_grads();
        }
        let mut tape = Tape::new();
        let bundle = self.model.losses(&mut tape, batch, ParamMode::Tracked)?;
        let total = tape.value(bundle.total).item() as f64;
        if !total.is_finite() {
            return Err(CosaError::NonFinite("training loss".into()));
        }
        let grads = tape.backward(bundle.total)?;
        let mut stores = self.model.prediction_stores_mut();
        for store in stores.iter_mut() {
            store.accumulate(&grads);
        }
        self.adam.step(&mut stores, self.lr);

        let n = batch.len() as f64;
        acc.samples += batch.len();
        acc.sums.total += total * n;
        acc.sums.prediction += tape.value(bundle.prediction).item() as f64 * n;
        if let Some(m) = &bundle.msd {
            acc.sums.msd += tape.value(m.total).item() as f64 * n;
            if let Some(x) = m.modality {
                acc.sums.msd_modality += tape.value(x).item() as f64 * n;
            }
            if let Some(x) = m.reconstruct {
                acc.sums.msd_reconstruct += tape.value(x).item() as f64 * n;
            }
            if let Some(x) = m.contrast {
                acc.sums.msd_contrast += tape.value(x).item() as f64 * n;
            }
        }
        if let Some(d) = bundle.dpsr {
            acc.sums.dpsr += tape.value(d).item() as f64 * n;
        }
        Ok(())
    }

    /// Agent-phase update: record the transition, then train critic and
    /// actors from one replayed batch and soft-update the targets.
    fn phase_b(&mut self, batch: &MultimodalBatch, acc: &mut EpochAccumulator) -> Result<()> {
        let pass = self.model.eval_pass(batch)?;

        // Replay stores explored actions: a seeded jitter around the
        // deterministic policy output, with the reward recomputed for
        // the jittered actions. Without this every stored action is an
        // exact function of the stored state and the critic cannot
        // identify the action's own effect on the reward.
        let explored = if self.cfg.exploration_noise > 0.0 {
            let sigma = self.cfg.exploration_noise;
            [0, 1, 2].map(|i| {
                let mut jittered = pass.actions[i].clone();
                for w in jittered.data_mut() {
                    let v = *w as f64 + sigma * normal(&mut self.explore_rng);
                    *w = v.clamp(0.0, 1.0) as f32;
                }
                jittered
            })
        } else {
            pass.actions.clone()
        };
        let explored_predictions =
            self.model
                .predict_with_actions(&pass.features, &explored, &batch.active)?;
        let rewards = agents::reward(&explored_predictions, &batch.labels)?;

        // Complete the previous transition with this batch's features.
        if let Some(pending) = self.pending.take() {
            if pending.state[0].shape()[0] == pass.features[0].shape()[0] {
                let next_state = scaled_next_state(&pass.features, &pending.actions);
                self.replay.push(ReplayRecord {
                    state: pending.state,
                    actions: pending.actions,
                    next_state,
                    reward: pending.reward,
                    active: pending.active,
                })?;
            }
            // A batch-size mismatch (final short batch) drops the transition.
        }
        self.pending = Some(PendingRecord {
            state: pass.features,
            actions: explored,
            reward: rewards,
            active: batch.active,
        });

        if self.replay.is_empty() {
            return Ok(());
        }
        let idx = self.replay.sample_indices(1)?[0];
        let record = self.replay.get(idx).clone();
        let targets = agents::td_targets(&self.model.agents, &record, self.cfg.gamma)?;

        // Critic first, on the frozen bootstrap targets.
        for store in self.model.critic_stores_mut() {
            store.zero_grads();
        }
        let mut tape = Tape::new();
        let lc = agents::loss_critic(&mut tape, &self.model.agents, &record, &targets)?;
        let weighted = tape.scalar_mul(lc, self.cfg.alpha[3]);
        let grads = tape.backward(weighted)?;
        let mut stores = self.model.critic_stores_mut();
        for store in stores.iter_mut() {
            store.accumulate(&grads);
        }
        self.adam.step(&mut stores, self.lr);
        acc.sums.critic += tape.value(lc).item() as f64;

        // Then the actors (plus the shared transform) against the
        // freshly updated, frozen critic.
        for store in self.model.actor_stores_mut() {
            store.zero_grads();
        }
        let mut tape = Tape::new();
        let la = agents::loss_actor(&mut tape, &self.model.agents, &record.state, &record.active)?;
        let weighted = tape.scalar_mul(la, self.cfg.alpha[3]);
        let grads = tape.backward(weighted)?;
        let mut stores = self.model.actor_stores_mut();
        for store in stores.iter_mut() {
            store.accumulate(&grads);
        }
        let actor_lr = self.lr * self.cfg.actor_lr_scale;
        self.adam.step(&mut stores, actor_lr);
        acc.sums.actor += tape.value(la).item() as f64;

        self.model.agents.soft_update(self.cfg.zeta)?;
        acc.agent_updates += 1;
        Ok(())
    }

    /// Loss values over a split without updating anything.
    pub fn split_losses(&self, dataset: &Dataset, split: Split) -> Result<LossRow> {
        let mut acc = EpochAccumulator::new();
        for batch in prepared_batches(dataset, split, &self.cfg, None)? {
            let mut tape = Tape::new();
            let bundle = self.model.losses(&mut tape, &batch, ParamMode::Frozen)?;
            let n = batch.len() as f64;
            acc.samples += batch.len();
            acc.sums.total += tape.value(bundle.total).item() as f64 * n;
            acc.sums.prediction += tape.value(bundle.prediction).item() as f64 * n;
            if let Some(m) = &bundle.msd {
                acc.sums.msd += tape.value(m.total).item() as f64 * n;
                if let Some(x) = m.modality {
                    acc.sums.msd_modality += tape.value(x).item() as f64 * n;
                }
                if let Some(x) = m.reconstruct {
                    acc.sums.msd_reconstruct += tape.value(x).item() as f64 * n;
                }
                if let Some(x) = m.contrast {
                    acc.sums.msd_contrast += tape.value(x).item() as f64 * n;
                }
            }
            if let Some(d) = bundle.dpsr {
                acc.sums.dpsr += tape.value(d).item() as f64 * n;
            }
        }
        Ok(acc.finish())
    }

    fn epoch_row(&self, dataset: &Dataset, epoch: u32, train: LossRow) -> Result<EpochRow> {
        let valid = self.split_losses(dataset, Split::Valid)?;
        let valid_metrics = metrics_for_split(&self.model, dataset, Split::Valid)?;
        let mut probe_acc = 0.0;
        let mut probe_dist = 0.0;
        let mut samples = 0usize;
        for batch in prepared_batches(dataset, Split::Valid, &self.cfg, None)? {
            let (acc, dist) = self.model.msd_diagnostics(&batch)?;
            probe_acc += acc * batch.len() as f64;
            probe_dist += dist * batch.len() as f64;
            samples += batch.len();
        }
        let n = samples.max(1) as f64;
        Ok(EpochRow {
            epoch,
            lr: self.lr,
            train,
            valid,
            valid_metrics,
            msd_probe_acc: probe_acc / n,
            msd_probe_dist: probe_dist / n,
        })
    }

    fn save_state(&self, dir: &Path, epoch: u32) -> Result<()> {
        state::save_full_state(
            dir,
            &FullState {
                model: &self.model,
                adam: &self.adam,
                replay: &self.replay,
                pending: &self.pending,
                explore_rng_pos: self.explore_rng.get_word_pos(),
                epoch,
                learning_rate: self.lr,
                stall_epochs: self.stall_epochs,
                best_valid: self.best_valid,
                best_epoch: self.best_epoch,
            },
        )
    }

    fn restore(&mut self, dir: &Path) -> Result<()> {
        let restored = state::load_full_state(dir, &mut self.model, &mut self.adam, &mut self.replay)?;
        self.pending = restored.pending;
        let pos: u128 = restored
            .meta
            .explore_rng_pos
            .parse()
            .map_err(|_| CosaError::Format("bad exploration rng position".into()))?;
        self.explore_rng.set_word_pos(pos);
        self.lr = restored.meta.learning_rate;
        self.stall_epochs = restored.meta.stall_epochs;
        self.best_valid = restored.meta.best_valid;
        self.best_epoch = restored.meta.best_epoch;
        self.start_epoch = restored.meta.epoch;
        Ok(())
    }

    /// Run epochs up to `stop`, appending to the metrics log and
    /// checkpointing best and last state under `run_dir`.
    fn run_epochs(&mut self, dataset: &Dataset, run_dir: &Path, stop: u32) -> Result<RunArtifacts> {
        let metrics_path = run_dir.join("metrics.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CosaError::io(metrics_path.display().to_string(), e))?;

        for epoch in self.start_epoch..stop {
            let batches =
                prepared_batches(dataset, Split::Train, &self.cfg, Some((self.cfg.seed, epoch as u64)))?;
            let mut acc = EpochAccumulator::new();
            let last = batches.len().saturating_sub(1);
            for (i, batch) in batches.iter().enumerate() {
                self.phase_a(batch, &mut acc)
                    .map_err(|e| CosaError::NonFinite(format!("epoch {epoch} batch {i}: {e}")))?;
                if self.cfg.modules.sac && (!self.cfg.alternate_per_epoch || i == last) {
                    self.phase_b(batch, &mut acc)?;
                }
            }
            let row = self.epoch_row(dataset, epoch, acc.finish())?;
            if !row.valid.total.is_finite() {
                return Err(CosaError::NonFinite(format!("validation loss at epoch {epoch}")));
            }

            // Patience-based decay and best checkpointing on valid loss.
            if row.valid.total < self.best_valid {
                self.best_valid = row.valid.total;
                self.best_epoch = epoch;
                self.stall_epochs = 0;
                let best = run_dir.join("checkpoints").join("best");
                std::fs::create_dir_all(&best)
                    .map_err(|e| CosaError::io(best.display().to_string(), e))?;
                crate::checkpoint::save_stores(&best.join("params.csa1"), &self.model.all_stores())?;
                std::fs::write(
                    best.join("meta.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "epoch": epoch,
                        "valid_total": row.valid.total,
                    }))?,
                )
                .map_err(|e| CosaError::io("best/meta.json".to_string(), e))?;
            } else {
                self.stall_epochs += 1;
                if self.stall_epochs >= self.cfg.lr_patience {
                    self.lr *= self.cfg.lr_decay;
                    self.stall_epochs = 0;
                }
            }

            if let Some(interval) = self.cfg.weights_export_interval {
                if interval > 0 && (epoch + 1) % interval == 0 {
                    let dir = run_dir.join("exports");
                    std::fs::create_dir_all(&dir)
                        .map_err(|e| CosaError::io(dir.display().to_string(), e))?;
                    let csv = crate::diagnostics::weights_csv(&self.model, dataset, Split::Valid)?;
                    let path = dir.join(format!("weights_epoch{epoch:04}.csv"));
                    std::fs::write(&path, csv)
                        .map_err(|e| CosaError::io(path.display().to_string(), e))?;
                }
            }

            let line = serde_json::to_string(&row)?;
            writeln!(log, "{line}")
                .map_err(|e| CosaError::io(metrics_path.display().to_string(), e))?;
            self.save_state(&run_dir.join("checkpoints").join("last"), epoch + 1)?;
        }

        Ok(RunArtifacts {
            run_dir: run_dir.to_path_buf(),
            epochs_completed: stop,
            best_valid: self.best_valid,
            best_epoch: self.best_epoch,
            config_hash: self.cfg.config_hash(),
        })
    }
}

fn write_run_manifest(run_dir: &Path, cfg: &TrainConfig, dataset_manifest_path: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| CosaError::io(run_dir.display().to_string(), e))?;
    let manifest = RunManifest {
        config_hash: cfg.config_hash(),
        dataset_hash: dataset_hash(dataset_manifest_path)?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: unix_timestamp(),
    };
    let path = run_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| CosaError::io(path.display().to_string(), e))?;
    cfg.save(&run_dir.join("config.json"))
}

fn unix_timestamp() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".to_string())
}

/// Train from scratch. `stop_after` caps the epochs actually run (for
/// interrupted-run tests); the configured total stays in the config.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    dataset_manifest_path: &Path,
    run_dir: &Path,
    stop_after: Option<u32>,
) -> Result<RunArtifacts> {
    write_run_manifest(run_dir, cfg, dataset_manifest_path)?;
    let mut trainer = Trainer::new(cfg, dataset)?;
    let stop = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    trainer.run_epochs(dataset, run_dir, stop)
}

/// Continue a checkpointed run toward the configured epoch count.
pub fn resume(run_dir: &Path, dataset: &Dataset, stop_after: Option<u32>) -> Result<RunArtifacts> {
    let cfg = TrainConfig::load(&run_dir.join("config.json"))?;
    let mut trainer = Trainer::new(&cfg, dataset)?;
    trainer.restore(&run_dir.join("checkpoints").join("last"))?;
    let stop = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    trainer.run_epochs(dataset, run_dir, stop)
}

/// Load a trained model from a run directory (`best` or `last`).
pub fn load_model(run_dir: &Path, dataset: &Dataset, which: &str) -> Result<(TrainConfig, CosaModel)> {
    let cfg = TrainConfig::load(&run_dir.join("config.json"))?;
    let classes = dataset.manifest.class_count.unwrap_or(0);
    let mut model = CosaModel::init(&cfg, dataset.manifest.dims, classes)?;
    let params = run_dir.join("checkpoints").join(which).join("params.csa1");
    if !params.exists() {
        return Err(CosaError::Config(format!(
            "run has no '{which}' checkpoint at {}",
            params.display()
        )));
    }
    let mut stores = model.all_stores_mut();
    crate::checkpoint::load_stores(&params, &mut stores)?;
    Ok((cfg, model))
}

/// Predictions over a split, respecting the configured modality subset.
pub fn split_predictions(
    model: &CosaModel,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<f32>, Labels)> {
    let mut preds = Vec::new();
    let mut msa_labels = Vec::new();
    let mut mer_labels = Vec::new();
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        let pass = model.eval_pass(&batch)?;
        preds.extend_from_slice(pass.predictions.data());
        match &batch.labels {
            Labels::Msa(v) => msa_labels.extend_from_slice(v),
            Labels::Mer(v) => mer_labels.extend_from_slice(v),
        }
    }
    let labels = match model.cfg.task {
        TaskKind::Msa => Labels::Msa(msa_labels),
        TaskKind::Mer => Labels::Mer(mer_labels),
    };
    Ok((preds, labels))
}

/// Task metrics of a trained model over a split, as JSON.
pub fn metrics_for_split(
    model: &CosaModel,
    dataset: &Dataset,
    split: Split,
) -> Result<serde_json::Value> {
    let (preds, labels) = split_predictions(model, dataset, split)?;
    match labels {
        Labels::Msa(truth) => {
            let m = metrics_msa(&preds, &truth, MsaMetricOptions::default())?;
            Ok(serde_json::json!({
                "task": "msa",
                "mae": m.mae,
                "corr": if m.corr_defined { serde_json::json!(m.corr) } else { serde_json::Value::Null },
                "corr_defined": m.corr_defined,
                "acc2": m.acc2,
                "f1": m.f1,
                "acc7": m.acc7,
                "acc2_support": m.acc2_support,
            }))
        }
        Labels::Mer(truth) => {
            let m = metrics_mer(&preds, &truth, model.classes)?;
            let mut v = serde_json::to_value(&m)?;
            v["task"] = serde_json::json!("mer");
            Ok(v)
        }
    }
}

/// Read the metrics log of a run.
pub fn read_metrics_log(run_dir: &Path) -> Result<Vec<EpochRow>> {
    let path = run_dir.join("metrics.jsonl");
    let text =
        std::fs::read_to_string(&path).map_err(|e| CosaError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CosaError::from))
        .collect()
}
