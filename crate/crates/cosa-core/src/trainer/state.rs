//! Full training-state persistence: parameters, optimizer moments,
//! replay contents, and the counters needed to resume bit-exactly.

use super::Adam;
use crate::agents::{ReplayMemory, ReplayRecord};
use crate::checkpoint::{read_bundle, save_stores, write_bundle};
use crate::model::CosaModel;
use crate::tensor::Tensor;
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordMeta {
    pub active: [bool; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerMeta {
    /// Epochs fully completed.
    pub epoch: u32,
    pub learning_rate: f64,
    pub stall_epochs: u32,
    pub best_valid: f64,
    pub best_epoch: u32,
    pub replay_rng_pos: String,
    pub explore_rng_pos: String,
    pub adam_steps: HashMap<String, u64>,
    pub replay_records: Vec<RecordMeta>,
    pub pending: Option<RecordMeta>,
}

fn record_entries<'a>(prefix: &str, r: &'a ReplayRecord, out: &mut Vec<(String, &'a Tensor<f32>)>) {
    for i in 0..3 {
        out.push((format!("{prefix}/state{i}"), &r.state[i]));
        out.push((format!("{prefix}/actions{i}"), &r.actions[i]));
        out.push((format!("{prefix}/next{i}"), &r.next_state[i]));
    }
}

/// A transition waiting for its next-state half.
#[derive(Clone, Debug)]
pub struct PendingRecord {
    pub state: [Tensor<f32>; 3],
    pub actions: [Tensor<f32>; 3],
    pub reward: Vec<f32>,
    pub active: [bool; 3],
}

pub struct FullState<'a> {
    pub model: &'a CosaModel,
    pub adam: &'a Adam,
    pub replay: &'a ReplayMemory,
    pub pending: &'a Option<PendingRecord>,
    pub explore_rng_pos: u128,
    pub epoch: u32,
    pub learning_rate: f64,
    pub stall_epochs: u32,
    pub best_valid: f64,
    pub best_epoch: u32,
}

pub fn save_full_state(dir: &Path, state: &FullState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CosaError::io(dir.display().to_string(), e))?;
    save_stores(&dir.join("params.csa1"), &state.model.all_stores())?;

    // Optimizer moments in the same container format.
    let adam_entries = state.adam.state_entries();
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    let mut adam_steps = HashMap::new();
    for (name, m, v, step) in &adam_entries {
        entries.push((format!("m/{name}"), m));
        entries.push((format!("v/{name}"), v));
        adam_steps.insert(name.clone(), *step);
    }
    write_bundle(&dir.join("adam.csa1"), &entries)?;

    // Replay transitions plus the pending half-transition.
    let mut replay_entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    let mut reward_tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut replay_records = Vec::new();
    for (i, r) in state.replay.records().enumerate() {
        record_entries(&format!("r{i}"), r, &mut replay_entries);
        reward_tensors.push((
            format!("r{i}/reward"),
            Tensor::new(vec![r.reward.len()], r.reward.clone())?,
        ));
        replay_records.push(RecordMeta { active: r.active });
    }
    let mut pending_meta = None;
    if let Some(p) = state.pending {
        for i in 0..3 {
            replay_entries.push((format!("pending/state{i}"), &p.state[i]));
            replay_entries.push((format!("pending/actions{i}"), &p.actions[i]));
        }
        reward_tensors.push((
            "pending/reward".to_string(),
            Tensor::new(vec![p.reward.len()], p.reward.clone())?,
        ));
        pending_meta = Some(RecordMeta { active: p.active });
    }
    for (name, t) in &reward_tensors {
        replay_entries.push((name.clone(), t));
    }
    write_bundle(&dir.join("replay.csa1"), &replay_entries)?;

    let meta = TrainerMeta {
        epoch: state.epoch,
        learning_rate: state.learning_rate,
        stall_epochs: state.stall_epochs,
        best_valid: state.best_valid,
        best_epoch: state.best_epoch,
        replay_rng_pos: state.replay.rng_word_pos().to_string(),
        explore_rng_pos: state.explore_rng_pos.to_string(),
        adam_steps,
        replay_records,
        pending: pending_meta,
    };
    let path = dir.join("state.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| CosaError::io(path.display().to_string(), e))
}

pub struct RestoredState {
    pub meta: TrainerMeta,
    pub pending: Option<PendingRecord>,
}

pub fn load_full_state(
    dir: &Path,
    model: &mut CosaModel,
    adam: &mut Adam,
    replay: &mut ReplayMemory,
) -> Result<RestoredState> {
    let meta_path = dir.join("state.json");
    let meta: TrainerMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| CosaError::io(meta_path.display().to_string(), e))?,
    )?;

    let mut stores = model.all_stores_mut();
    crate::checkpoint::load_stores(&dir.join("params.csa1"), &mut stores)?;

    let adam_bundle = read_bundle(&dir.join("adam.csa1"))?;
    let by_name: HashMap<String, Tensor<f32>> = adam_bundle.into_iter().collect();
    for (name, step) in &meta.adam_steps {
        let m = by_name
            .get(&format!("m/{name}"))
            .ok_or_else(|| CosaError::Format(format!("optimizer state missing m/{name}")))?;
        let v = by_name
            .get(&format!("v/{name}"))
            .ok_or_else(|| CosaError::Format(format!("optimizer state missing v/{name}")))?;
        let (store, param) = name
            .split_once('/')
            .ok_or_else(|| CosaError::Format(format!("bad optimizer key {name}")))?;
        adam.restore_entry(store, param, m.clone(), v.clone(), *step);
    }

    let replay_bundle = read_bundle(&dir.join("replay.csa1"))?;
    let by_name: HashMap<String, Tensor<f32>> = replay_bundle.into_iter().collect();
    let fetch = |name: String| -> Result<Tensor<f32>> {
        by_name
            .get(&name)
            .cloned()
            .ok_or_else(|| CosaError::Format(format!("replay state missing {name}")))
    };
    let mut records = Vec::new();
    for (i, rm) in meta.replay_records.iter().enumerate() {
        let reward = fetch(format!("r{i}/reward"))?.into_data();
        records.push(ReplayRecord {
            state: [
                fetch(format!("r{i}/state0"))?,
                fetch(format!("r{i}/state1"))?,
                fetch(format!("r{i}/state2"))?,
            ],
            actions: [
                fetch(format!("r{i}/actions0"))?,
                fetch(format!("r{i}/actions1"))?,
                fetch(format!("r{i}/actions2"))?,
            ],
            next_state: [
                fetch(format!("r{i}/next0"))?,
                fetch(format!("r{i}/next1"))?,
                fetch(format!("r{i}/next2"))?,
            ],
            reward,
            active: rm.active,
        });
    }
    replay.clear_and_load(records)?;
    let pos: u128 = meta
        .replay_rng_pos
        .parse()
        .map_err(|_| CosaError::Format("bad replay rng position".into()))?;
    replay.set_rng_word_pos(pos);

    let pending = match &meta.pending {
        None => None,
        Some(pm) => Some(PendingRecord {
            state: [
                fetch("pending/state0".into())?,
                fetch("pending/state1".into())?,
                fetch("pending/state2".into())?,
            ],
            actions: [
                fetch("pending/actions0".into())?,
                fetch("pending/actions1".into())?,
                fetch("pending/actions2".into())?,
            ],
            reward: fetch("pending/reward".into())?.into_data(),
            active: pm.active,
        }),
    };
    Ok(RestoredState { meta, pending })
}
