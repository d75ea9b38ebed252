//! Cooperating per-modality agents.
//!
//! Each modality has a deterministic policy (actor) that reads its own
//! features plus differential features against the other modalities
//! (shared transform) and emits one weight per frame in [0, 1]. A single
//! transformer-style critic scores all actions jointly; actors maximize
//! it, the critic regresses soft-updated bootstrap targets, and a FIFO
//! replay memory feeds both.

use crate::data::{Labels, MODALITIES};
use crate::module::{Block, LayerSpec, ModuleSpec};
use crate::params::stream_seed;
use crate::tape::{NodeRef, ParamMode, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{CosaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

pub struct AgentModel<F = f32> {
    pub actors: [Block<F>; 3],
    /// Shared transform behind all six differential features.
    pub diff_transform: Block<F>,
    pub critic: Block<F>,
    pub target_actors: [Block<F>; 3],
    pub target_diff: Block<F>,
    pub target_critic: Block<F>,
    pub embed: usize,
}

impl AgentModel<f32> {
    pub fn init(
        embed: usize,
        actor_hidden: usize,
        critic_key: usize,
        critic_ff: usize,
        seed: u64,
    ) -> Self {
        // The action head starts random, not zero: constant initial
        // actions give the critic a zero-variance input channel that
        // soaks up the reward offset and drags every action downward.
        let actor_spec = ModuleSpec::new(
            3 * embed,
            vec![
                LayerSpec::Affine { out: actor_hidden, zero_init: false },
                LayerSpec::Relu,
                LayerSpec::Affine { out: 1, zero_init: false },
                LayerSpec::Sigmoid,
            ],
        );
        let diff_spec = ModuleSpec::new(
            embed,
            vec![LayerSpec::Affine { out: embed, zero_init: false }, LayerSpec::Relu],
        );
        let critic_spec = ModuleSpec::new(
            embed + 1,
            vec![
                LayerSpec::SelfAttention { key_dim: critic_key, ff_hidden: critic_ff },
                LayerSpec::MeanFrames,
                LayerSpec::Affine { out: 1, zero_init: true },
            ],
        );
        let actors = [
            Block::init("sac.actor.v", actor_spec.clone(), seed),
            Block::init("sac.actor.a", actor_spec.clone(), seed),
            Block::init("sac.actor.t", actor_spec, seed),
        ];
        let diff_transform = Block::init("sac.difft", diff_spec, seed);
        let critic = Block::init("sac.critic", critic_spec, seed);
        let target_actors = [
            actors[0].clone_as("sac.actor.v.target"),
            actors[1].clone_as("sac.actor.a.target"),
            actors[2].clone_as("sac.actor.t.target"),
        ];
        let target_diff = diff_transform.clone_as("sac.difft.target");
        let target_critic = critic.clone_as("sac.critic.target");
        Self {
            actors,
            diff_transform,
            critic,
            target_actors,
            target_diff,
            target_critic,
            embed,
        }
    }
}

impl<F: Scalar> AgentModel<F> {
    pub fn convert<G: Scalar>(&self) -> AgentModel<G> {
        AgentModel {
            actors: [
                self.actors[0].convert(),
                self.actors[1].convert(),
                self.actors[2].convert(),
            ],
            diff_transform: self.diff_transform.convert(),
            critic: self.critic.convert(),
            target_actors: [
                self.target_actors[0].convert(),
                self.target_actors[1].convert(),
                self.target_actors[2].convert(),
            ],
            target_diff: self.target_diff.convert(),
            target_critic: self.target_critic.convert(),
            embed: self.embed,
        }
    }

    /// Per-frame actions for every modality, in `[0, 1]`.
    ///
    /// For modality `i`, the policy sees `[f_i (+) F_t(f_i - f_j) (+)
    /// F_t(f_i - f_k)]` per frame, with the others in fixed V, A, T
    /// order. Inactive modalities yield all-ones actions. `target`
    /// selects the target parameter copies; `mode` controls whether
    /// gradients reach the actor and shared-transform parameters.
    pub fn act(
        &self,
        tape: &mut Tape<F>,
        features: &[NodeRef; 3],
        active: &[bool; 3],
        target: bool,
        mode: ParamMode,
    ) -> Result<[NodeRef; 3]> {
        let shape = tape.shape(features[0]).to_vec();
        if shape.len() != 3 {
            return Err(CosaError::Shape(format!(
                "policies need [B, T, h] features, got {shape:?}"
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        for m in MODALITIES {
            if tape.shape(features[m.index()]) != &shape[..] {
                return Err(CosaError::Shape(
                    "all modalities must share [B, T, h] for the policies".into(),
                ));
            }
        }
        let (actors, diff) = if target {
            (&self.target_actors, &self.target_diff)
        } else {
            (&self.actors, &self.diff_transform)
        };
        let mut actions = Vec::with_capacity(3);
        for m in MODALITIES {
            let i = m.index();
            if !active[i] {
                actions.push(tape.constant(Tensor::full(&[b, t], F::ONE)));
                continue;
            }
            let mut parts = vec![features[i]];
            for other in MODALITIES {
                if other.index() == i {
                    continue;
                }
                let d = tape.sub(features[i], features[other.index()]);
                parts.push(diff.forward(tape, d, mode)?);
            }
            let input = tape.concat_last(&parts);
            let raw = actors[i].forward(tape, input, mode)?;
            actions.push(tape.reshape(raw, &[b, t]));
        }
        Ok([actions[0], actions[1], actions[2]])
    }

    /// Joint critic value, one scalar per sample.
    ///
    /// Per frame the feature and weight of each modality are
    /// concatenated, summed over modalities, run through the attention
    /// block, mean-pooled, and mapped to a scalar.
    pub fn critic_q(
        &self,
        tape: &mut Tape<F>,
        features: &[NodeRef; 3],
        actions: &[NodeRef; 3],
        target: bool,
        mode: ParamMode,
    ) -> Result<NodeRef> {
        let shape = tape.shape(features[0]).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let mut summed: Option<NodeRef> = None;
        for m in MODALITIES {
            let i = m.index();
            let w3 = tape.reshape(actions[i], &[b, t, 1]);
            let z = tape.concat_last(&[features[i], w3]);
            summed = Some(match summed {
                None => z,
                Some(prev) => tape.add(prev, z),
            });
        }
        let critic = if target { &self.target_critic } else { &self.critic };
        let q = critic.forward(tape, summed.expect("three modalities"), mode)?;
        Ok(tape.reshape(q, &[b]))
    }

    /// Blend every target store toward its live counterpart:
    /// `target <- zeta * live + (1 - zeta) * target`.
    pub fn soft_update(&mut self, zeta: f64) -> Result<()> {
        for i in 0..3 {
            self.target_actors[i]
                .params
                .soft_update_from(&self.actors[i].params, zeta)?;
        }
        self.target_diff
            .params
            .soft_update_from(&self.diff_transform.params, zeta)?;
        self.target_critic
            .params
            .soft_update_from(&self.critic.params, zeta)?;
        Ok(())
    }
}

/// Scale features by per-frame weights: `out[b,t,:] = w[b,t] * f[b,t,:]`.
pub fn apply_actions<F: Scalar>(
    tape: &mut Tape<F>,
    features: &[NodeRef; 3],
    actions: &[NodeRef; 3],
) -> [NodeRef; 3] {
    [0, 1, 2].map(|i| tape.scale_frames(features[i], actions[i]))
}

/// Immediate per-sample reward. MSA: `-|y' - y|`. MER: the softmax
/// probability assigned to the true class.
pub fn reward(predictions: &Tensor<f32>, labels: &Labels) -> Result<Vec<f32>> {
    match labels {
        Labels::Msa(truth) => {
            if predictions.shape() != [truth.len()] {
                return Err(CosaError::Shape(format!(
                    "reward: predictions {:?} vs {} labels",
                    predictions.shape(),
                    truth.len()
                )));
            }
            Ok(predictions
                .data()
                .iter()
                .zip(truth)
                .map(|(&p, &y)| -((p as f64 - y as f64).abs()) as f32)
                .collect())
        }
        Labels::Mer(truth) => {
            let shape = predictions.shape();
            if shape.len() != 2 || shape[0] != truth.len() {
                return Err(CosaError::Shape(format!(
                    "reward: logits {shape:?} vs {} labels",
                    truth.len()
                )));
            }
            let classes = shape[1];
            let mut out = Vec::with_capacity(truth.len());
            for (row, &t) in predictions.data().chunks(classes).zip(truth) {
                if t >= classes {
                    return Err(CosaError::Config(format!(
                        "reward: class {t} out of range for {classes} classes"
                    )));
                }
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                out.push((exps[t] / sum) as f32);
            }
            Ok(out)
        }
    }
}

/// One transition: the features the agents saw, the actions they took,
/// the next features scaled by those actions, and the reward.
#[derive(Clone, Debug)]
pub struct ReplayRecord {
    pub state: [Tensor<f32>; 3],
    pub actions: [Tensor<f32>; 3],
    pub next_state: [Tensor<f32>; 3],
    pub reward: Vec<f32>,
    pub active: [bool; 3],
}

impl ReplayRecord {
    pub fn validate(&self) -> Result<()> {
        let shape = self.state[0].shape();
        let (b, t) = (shape[0], shape[1]);
        for i in 0..3 {
            if self.state[i].shape() != shape
                || self.next_state[i].shape() != shape
                || self.actions[i].shape() != [b, t]
            {
                return Err(CosaError::Shape(format!(
                    "replay record: inconsistent shapes in modality {i}"
                )));
            }
        }
        if self.reward.len() != b {
            return Err(CosaError::Shape(format!(
                "replay record: {} rewards for {b} samples",
                self.reward.len()
            )));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(CosaError::NonFinite("replay reward".into()));
        }
        Ok(())
    }
}

/// Bounded FIFO of transitions with seed-deterministic uniform sampling
/// (with replacement).
pub struct ReplayMemory {
    capacity: usize,
    records: VecDeque<ReplayRecord>,
    rng: ChaCha8Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity: capacity.max(1),
            records: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "replay")),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, record: ReplayRecord) -> Result<()> {
        record.validate()?;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    pub fn get(&self, idx: usize) -> &ReplayRecord {
        &self.records[idx]
    }

    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.records.is_empty() {
            return Err(CosaError::Config("cannot sample from empty replay memory".into()));
        }
        let len = self.records.len();
        Ok((0..n).map(|_| self.rng.gen_range(0..len)).collect())
    }

    /// RNG position, for checkpointing.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_rng_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    pub fn records(&self) -> impl Iterator<Item = &ReplayRecord> {
        self.records.iter()
    }

    pub fn clear_and_load(&mut self, records: Vec<ReplayRecord>) -> Result<()> {
        self.records.clear();
        for r in records {
            self.push(r)?;
        }
        Ok(())
    }
}

fn const_states<F: Scalar>(tape: &mut Tape<F>, state: &[Tensor<f32>; 3]) -> [NodeRef; 3] {
    [0, 1, 2].map(|i| tape.constant(state[i].convert()))
}

fn const_actions<F: Scalar>(tape: &mut Tape<F>, actions: &[Tensor<f32>; 3]) -> [NodeRef; 3] {
    [0, 1, 2].map(|i| tape.constant(actions[i].convert()))
}

/// Bootstrap targets `r + gamma * Q'` where `Q'` comes from the target
/// actor and target critic on the next state. Runs on a throwaway tape
/// with everything frozen, so no gradient can flow through the target.
pub fn td_targets(model: &AgentModel<f32>, record: &ReplayRecord, gamma: f64) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let next = const_states(&mut tape, &record.next_state);
    let next_actions = model.act(&mut tape, &next, &record.active, true, ParamMode::Frozen)?;
    let q_next = model.critic_q(&mut tape, &next, &next_actions, true, ParamMode::Frozen)?;
    Ok(record
        .reward
        .iter()
        .zip(tape.value(q_next).data())
        .map(|(&r, &q)| (r as f64 + gamma * q as f64) as f32)
        .collect())
}

/// Critic loss: mean squared TD error against the fixed targets.
/// Gradients reach the live critic only.
pub fn loss_critic<F: Scalar>(
    tape: &mut Tape<F>,
    model: &AgentModel<F>,
    record: &ReplayRecord,
    targets: &[f32],
) -> Result<NodeRef> {
    let states = const_states(tape, &record.state);
    let actions = const_actions(tape, &record.actions);
    let q = model.critic_q(tape, &states, &actions, false, ParamMode::Tracked)?;
    let qbar = tape.constant(Tensor::new(
        vec![targets.len()],
        targets.iter().map(|&v| F::from_f32(v)).collect(),
    )?);
    let diff = tape.sub(q, qbar);
    let sq = tape.mul(diff, diff);
    Ok(tape.mean_all(sq))
}

/// Actor loss: negative mean critic value of the live policy's actions.
/// Gradients reach the actors and the shared transform; the critic
/// parameters are frozen.
pub fn loss_actor<F: Scalar>(
    tape: &mut Tape<F>,
    model: &AgentModel<F>,
    state: &[Tensor<f32>; 3],
    active: &[bool; 3],
) -> Result<NodeRef> {
    let states = const_states(tape, state);
    let actions = model.act(tape, &states, active, false, ParamMode::Tracked)?;
    let q = model.critic_q(tape, &states, &actions, false, ParamMode::Frozen)?;
    let mean = tape.mean_all(q);
    Ok(tape.scalar_mul(mean, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(h: usize, seed: u64) -> AgentModel<f32> {
        AgentModel::init(h, 8, 4, 6, seed)
    }

    fn feature_tensors(b: usize, t: usize, h: usize, gain: f32) -> [Tensor<f32>; 3] {
        [0, 1, 2].map(|m| {
            Tensor::from_fn(&[b, t, h], |i| ((i as f32 + 17.0 * m as f32) * gain).sin() * 0.5)
        })
    }

    fn feature_nodes(tape: &mut Tape<f32>, tensors: &[Tensor<f32>; 3]) -> [NodeRef; 3] {
        [0, 1, 2].map(|i| tape.constant(tensors[i].clone()))
    }

    #[test]
    fn fresh_zero_head_actors_emit_half_everywhere() {
        let m = model(6, 1);
        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &feature_tensors(2, 3, 6, 0.31));
        let actions = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        for a in actions {
            assert!(tape.value(a).data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn live_and_target_agree_right_after_hard_copy() {
        let mut m = model(6, 2);
        // Perturb live, hard-copy into targets, then compare actions.
        let w = m.actors[0].params.value("l2.w").map(|_| 0.3);
        m.actors[0].params.set_value("l2.w", w);
        m.target_actors[0] = m.actors[0].clone_as("sac.actor.v.target");

        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &feature_tensors(2, 4, 6, 0.23));
        let live = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        let target = m.act(&mut tape, &f, &[true; 3], true, ParamMode::Frozen).unwrap();
        for (l, t) in live.iter().zip(&target) {
            assert_eq!(tape.value(*l).data(), tape.value(*t).data());
        }
    }

    #[test]
    fn actions_stay_in_unit_interval_for_wild_inputs() {
        let m = model(5, 3);
        let mut tape = Tape::new();
        let f = [0, 1, 2].map(|i| {
            tape.constant(Tensor::from_fn(&[2, 3, 5], |j| {
                ((i * 31 + j) as f32 * 13.7).sin() * 50.0
            }))
        });
        let actions = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        for a in actions {
            assert!(tape
                .value(a)
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// Plain-f64 reimplementation of the actor chain, independent of the
    /// tape.
    fn actor_oracle(
        m: &AgentModel<f64>,
        feats: &[Vec<f64>; 3],
        b: usize,
        t: usize,
        h: usize,
        modality: usize,
    ) -> Vec<f64> {
        let affine = |x: &[f64], w: &Tensor<f64>, bias: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * dout];
            for r in 0..rows {
                for o in 0..dout {
                    let mut acc = bias.data()[o];
                    for k in 0..din {
                        acc += x[r * din + k] * w.data()[k * dout + o];
                    }
                    out[r * dout + o] = acc;
                }
            }
            out
        };
        let rows = b * t;
        let mut diffs = Vec::new();
        for other in 0..3 {
            if other == modality {
                continue;
            }
            let d: Vec<f64> = feats[modality]
                .iter()
                .zip(&feats[other])
                .map(|(a, b)| a - b)
                .collect();
            let dw = m.diff_transform.params.value("l0.w");
            let db = m.diff_transform.params.value("l0.b");
            let mut out = affine(&d, dw, db, rows);
            for v in &mut out {
                *v = v.max(0.0);
            }
            diffs.push(out);
        }
        let mut input = vec![0.0; rows * 3 * h];
        for r in 0..rows {
            input[r * 3 * h..r * 3 * h + h].copy_from_slice(&feats[modality][r * h..(r + 1) * h]);
            input[r * 3 * h + h..r * 3 * h + 2 * h].copy_from_slice(&diffs[0][r * h..(r + 1) * h]);
            input[r * 3 * h + 2 * h..r * 3 * h + 3 * h]
                .copy_from_slice(&diffs[1][r * h..(r + 1) * h]);
        }
        let p = &m.actors[modality].params;
        let mut hdn = affine(&input, p.value("l0.w"), p.value("l0.b"), rows);
        for v in &mut hdn {
            *v = v.max(0.0);
        }
        let raw = affine(&hdn, p.value("l2.w"), p.value("l2.b"), rows);
        raw.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
    }

    #[test]
    fn act_matches_f64_step_by_step_oracle() {
        let (b, t, h) = (2, 4, 8);
        let mut m32 = model(h, 7);
        // Give the zero head real values so the test is not trivial.
        for a in m32.actors.iter_mut() {
            let w = Tensor::from_fn(&[8, 1], |i| (i as f32 * 0.29).sin() * 0.4);
            a.params.set_value("l2.w", w);
            a.params.set_value("l2.b", Tensor::new(vec![1], vec![0.13]).unwrap());
        }
        let tensors = feature_tensors(b, t, h, 0.37);
        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &tensors);
        let actions = m32.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();

        let m64: AgentModel<f64> = m32.convert();
        let feats64: [Vec<f64>; 3] =
            [0, 1, 2].map(|i| tensors[i].data().iter().map(|&v| v as f64).collect());
        for modality in 0..3 {
            let expect = actor_oracle(&m64, &feats64, b, t, h, modality);
            for (got, want) in tape.value(actions[modality]).data().iter().zip(&expect) {
                assert!(
                    (*got as f64 - want).abs() < 1e-5,
                    "modality {modality}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn apply_actions_identity_zero_and_halving() {
        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &feature_tensors(2, 3, 4, 0.41));
        let ones = [0; 3].map(|_| tape.constant(Tensor::full(&[2, 3], 1.0f32)));
        let same = apply_actions(&mut tape, &f, &ones);
        for (a, b) in same.iter().zip(&f) {
            assert_eq!(tape.value(*a).data(), tape.value(*b).data());
        }
        let zeros = [0; 3].map(|_| tape.constant(Tensor::zeros(&[2, 3])));
        let none = apply_actions(&mut tape, &f, &zeros);
        assert!(none
            .iter()
            .all(|n| tape.value(*n).data().iter().all(|&v| v == 0.0)));

        let halves = [0; 3].map(|_| tape.constant(Tensor::full(&[2, 3], 0.5f32)));
        let halved = apply_actions(&mut tape, &f, &halves);
        for (h, o) in halved.iter().zip(&f) {
            for (hv, ov) in tape.value(*h).data().iter().zip(tape.value(*o).data()) {
                assert!((hv - ov * 0.5).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_head_critic_scores_zero_and_batch_permutes() {
        let m = model(5, 9);
        let mut tape = Tape::new();
        let tensors = feature_tensors(3, 4, 5, 0.19);
        let f = feature_nodes(&mut tape, &tensors);
        let actions = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        let q = m
            .critic_q(&mut tape, &f, &actions, false, ParamMode::Frozen)
            .unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_is_batch_equivariant() {
        let mut m = model(5, 11);
        let wshape = m.critic.params.value("l2.w").shape().to_vec();
        m.critic
            .params
            .set_value("l2.w", Tensor::from_fn(&wshape, |i| (i as f32 * 0.23).cos() * 0.3));
        let (b, t, h) = (3, 4, 5);
        let base = feature_tensors(b, t, h, 0.29);
        let perm = [2usize, 0, 1];
        let permuted: [Tensor<f32>; 3] = [0, 1, 2].map(|mi| {
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(&base[mi].data()[p * t * h..(p + 1) * t * h]);
            }
            Tensor::new(vec![b, t, h], data).unwrap()
        });

        let score = |tensors: &[Tensor<f32>; 3]| -> Vec<f32> {
            let mut tape = Tape::new();
            let f = feature_nodes(&mut tape, tensors);
            let actions = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
            let q = m
                .critic_q(&mut tape, &f, &actions, false, ParamMode::Frozen)
                .unwrap();
            tape.value(q).data().to_vec()
        };
        let q_base = score(&base);
        let q_perm = score(&permuted);
        for (i, &p) in perm.iter().enumerate() {
            assert!((q_perm[i] - q_base[p]).abs() < 1e-6);
        }
    }

    /// Plain-f64 reimplementation of the critic chain.
    fn critic_oracle(
        m: &AgentModel<f64>,
        feats: &[Vec<f64>; 3],
        actions: &[Vec<f64>; 3],
        b: usize,
        t: usize,
        h: usize,
        key_dim: usize,
    ) -> Vec<f64> {
        let d = h + 1;
        let p = &m.critic.params;
        let mat = |x: &[f64], w: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * dout];
            for r in 0..rows {
                for o in 0..dout {
                    let mut acc = 0.0;
                    for k in 0..din {
                        acc += x[r * din + k] * w.data()[k * dout + o];
                    }
                    out[r * dout + o] = acc;
                }
            }
            out
        };
        let mut qs = Vec::new();
        for bi in 0..b {
            // Sum of per-modality (feature, weight) rows for this sample.
            let mut z = vec![0.0; t * d];
            for ti in 0..t {
                for mi in 0..3 {
                    for k in 0..h {
                        z[ti * d + k] += feats[mi][(bi * t + ti) * h + k];
                    }
                    z[ti * d + h] += actions[mi][bi * t + ti];
                }
            }
            let q = mat(&z, p.value("l0.wq"), t);
            let k = mat(&z, p.value("l0.wk"), t);
            let v = mat(&z, p.value("l0.wv"), t);
            let scale = 1.0 / (key_dim as f64).sqrt();
            let mut mixed = vec![0.0; t * d];
            for p_ in 0..t {
                let mut scores = vec![0.0; t];
                for q_ in 0..t {
                    let mut s = 0.0;
                    for kk in 0..key_dim {
                        s += q[p_ * key_dim + kk] * k[q_ * key_dim + kk];
                    }
                    scores[q_] = s * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for q_ in 0..t {
                    let a = exps[q_] / sum;
                    for kk in 0..d {
                        mixed[p_ * d + kk] += a * v[q_ * d + kk];
                    }
                }
            }
            let z1: Vec<f64> = z.iter().zip(&mixed).map(|(a, b)| a + b).collect();
            let mut ff = mat(&z1, p.value("l0.ff1.w"), t);
            for (i, vv) in ff.iter_mut().enumerate() {
                *vv = (*vv + p.value("l0.ff1.b").data()[i % p.value("l0.ff1.b").len()]).max(0.0);
            }
            let mut ff2 = mat(&ff, p.value("l0.ff2.w"), t);
            for (i, vv) in ff2.iter_mut().enumerate() {
                *vv += p.value("l0.ff2.b").data()[i % d];
            }
            let z2: Vec<f64> = z1.iter().zip(&ff2).map(|(a, b)| a + b).collect();
            let mut pooled = vec![0.0; d];
            for ti in 0..t {
                for kk in 0..d {
                    pooled[kk] += z2[ti * d + kk] / t as f64;
                }
            }
            let mut qv = p.value("l2.b").data()[0];
            for kk in 0..d {
                qv += pooled[kk] * p.value("l2.w").data()[kk];
            }
            qs.push(qv);
        }
        qs
    }

    #[test]
    fn critic_matches_f64_attention_oracle() {
        let (b, t, h, key) = (2, 3, 5, 4);
        let mut m32 = model(h, 13);
        let wshape = m32.critic.params.value("l2.w").shape().to_vec();
        m32.critic
            .params
            .set_value("l2.w", Tensor::from_fn(&wshape, |i| (i as f32 * 0.31).sin() * 0.5));
        m32.critic
            .params
            .set_value("l2.b", Tensor::new(vec![1], vec![0.21]).unwrap());

        let tensors = feature_tensors(b, t, h, 0.43);
        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &tensors);
        let actions = m32.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        let q = m32
            .critic_q(&mut tape, &f, &actions, false, ParamMode::Frozen)
            .unwrap();

        let m64: AgentModel<f64> = m32.convert();
        let feats64: [Vec<f64>; 3] =
            [0, 1, 2].map(|i| tensors[i].data().iter().map(|&v| v as f64).collect());
        let actions64: [Vec<f64>; 3] = [0, 1, 2].map(|i| {
            tape.value(actions[i])
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect()
        });
        let expect = critic_oracle(&m64, &feats64, &actions64, b, t, h, key);
        for (got, want) in tape.value(q).data().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn reward_closed_forms() {
        let msa = reward(
            &Tensor::new(vec![2], vec![1.5, 2.0]).unwrap(),
            &Labels::Msa(vec![2.0, 2.0]),
        )
        .unwrap();
        assert!((msa[0] + 0.5).abs() < 1e-7);
        assert_eq!(msa[1], 0.0);

        let mer = reward(
            &Tensor::zeros(&[1, 4]),
            &Labels::Mer(vec![2]),
        )
        .unwrap();
        assert!((mer[0] - 0.25).abs() < 1e-7);

        assert!(reward(&Tensor::zeros(&[1, 4]), &Labels::Mer(vec![4])).is_err());
    }

    fn toy_record(m: &AgentModel<f32>, b: usize, t: usize, gain: f32) -> ReplayRecord {
        let h = m.embed;
        let state = feature_tensors(b, t, h, gain);
        let mut tape = Tape::new();
        let f = feature_nodes(&mut tape, &state);
        let actions = m.act(&mut tape, &f, &[true; 3], false, ParamMode::Frozen).unwrap();
        let action_tensors: [Tensor<f32>; 3] = [0, 1, 2].map(|i| tape.value(actions[i]).clone());
        ReplayRecord {
            state: state.clone(),
            actions: action_tensors,
            next_state: state,
            reward: vec![1.0; b],
            active: [true; 3],
        }
    }

    #[test]
    fn td_targets_closed_forms() {
        let mut m = model(5, 15);
        let record = toy_record(&m, 2, 3, 0.27);
        // gamma = 0: targets equal rewards exactly.
        let t0 = td_targets(&m, &record, 0.0).unwrap();
        assert_eq!(t0, vec![1.0, 1.0]);

        // Force target critic output to 4: Q' = 4 so r=0, gamma=0.5 -> 2.
        m.target_critic
            .params
            .set_value("l2.b", Tensor::new(vec![1], vec![4.0]).unwrap());
        let mut record0 = record.clone();
        record0.reward = vec![0.0, 0.0];
        let t = td_targets(&m, &record0, 0.5).unwrap();
        for v in t {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn critic_loss_closed_forms_and_no_actor_leak() {
        let m = model(5, 17);
        let record = toy_record(&m, 2, 3, 0.33);
        // Zero-head critic gives Q = 0; targets 0 -> loss 0.
        let mut tape = Tape::new();
        let l = loss_critic(&mut tape, &m, &record, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // Q - target = -2 everywhere -> mean squared error 4.
        let mut tape = Tape::new();
        let l = loss_critic(&mut tape, &m, &record, &[2.0, 2.0]).unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-6);
        let grads = tape.backward(l).unwrap();
        assert!(grads.iter().all(|((store, _), _)| store == "sac.critic"));
        assert!(grads.get("sac.critic", "l2.b").is_some());
    }

    #[test]
    fn actor_loss_no_critic_leak_and_zero_when_head_zeroed() {
        let mut m = model(5, 19);
        // Give actors a nonzero head so actions vary.
        for a in m.actors.iter_mut() {
            let wshape = a.params.value("l2.w").shape().to_vec();
            a.params
                .set_value("l2.w", Tensor::from_fn(&wshape, |i| (i as f32 * 0.4).sin() * 0.3));
        }
        let record = toy_record(&m, 2, 3, 0.21);

        // Critic head still zero: loss 0 and zero actor gradients.
        let mut tape = Tape::new();
        let l = loss_actor(&mut tape, &m, &record.state, &[true; 3]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let grads = tape.backward(l).unwrap();
        for ((store, _), g) in grads.iter() {
            assert!(store.starts_with("sac.actor") || store == "sac.difft");
            assert!(g.data().iter().all(|&v| v == 0.0));
        }

        // Nonzero critic: gradients exist on actors, none on the critic.
        let wshape = m.critic.params.value("l2.w").shape().to_vec();
        m.critic
            .params
            .set_value("l2.w", Tensor::from_fn(&wshape, |i| (i as f32 * 0.17).cos() * 0.4));
        let mut tape = Tape::new();
        let l = loss_actor(&mut tape, &m, &record.state, &[true; 3]).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.iter().any(|((store, _), g)| {
            store.starts_with("sac.actor") && g.data().iter().any(|&v| v != 0.0)
        }));
        assert!(grads.get("sac.critic", "l2.w").is_none());
        assert!(grads.get("sac.difft", "l0.w").is_some());
    }

    #[test]
    fn soft_update_examples() {
        let mut m = model(4, 21);
        let shape = m.actors[0].params.value("l0.w").shape().to_vec();
        m.actors[0].params.set_value("l0.w", Tensor::full(&shape, 1.0));
        m.target_actors[0].params.set_value("l0.w", Tensor::zeros(&shape));

        m.soft_update(0.01).unwrap();
        assert!((m.target_actors[0].params.value("l0.w").data()[0] - 0.01).abs() < 1e-7);

        m.soft_update(1.0).unwrap();
        assert_eq!(m.target_actors[0].params.value("l0.w").data()[0], 1.0);
    }

    #[test]
    fn soft_update_halves_gap_every_69_steps_at_zeta_001() {
        let mut m = model(4, 23);
        let shape = m.actors[0].params.value("l0.w").shape().to_vec();
        m.actors[0].params.set_value("l0.w", Tensor::full(&shape, 1.0));
        m.target_actors[0].params.set_value("l0.w", Tensor::zeros(&shape));

        let gap = |m: &AgentModel<f32>| {
            (m.actors[0].params.value("l0.w").data()[0]
                - m.target_actors[0].params.value("l0.w").data()[0]) as f64
        };
        let g0 = gap(&m);
        for _ in 0..69 {
            m.soft_update(0.01).unwrap();
        }
        let ratio = gap(&m) / g0;
        assert!((ratio - 0.5).abs() < 0.01, "gap ratio {ratio}");
    }

    #[test]
    fn replay_fifo_sampling_and_errors() {
        let m = model(4, 25);
        let mut memory = ReplayMemory::new(3, 0);
        assert!(memory.sample_indices(1).is_err());
        for gain in [0.1f32, 0.2, 0.3, 0.4] {
            memory.push(toy_record(&m, 1, 2, gain)).unwrap();
        }
        assert_eq!(memory.len(), 3);
        // First record (gain 0.1) was evicted; head is now gain 0.2.
        let head = memory.get(0).state[0].data()[0];
        let expect = feature_tensors(1, 2, 4, 0.2)[0].data()[0];
        assert_eq!(head, expect);

        let mut a = ReplayMemory::new(8, 7);
        let mut b = ReplayMemory::new(8, 7);
        for gain in [0.1f32, 0.2, 0.3] {
            a.push(toy_record(&m, 1, 2, gain)).unwrap();
            b.push(toy_record(&m, 1, 2, gain)).unwrap();
        }
        assert_eq!(a.sample_indices(5).unwrap(), b.sample_indices(5).unwrap());
        assert!(a.sample_indices(0).unwrap().is_empty());
    }

    #[test]
    fn inactive_modality_isolation() {
        let m = model(6, 27);
        let (b, t, h) = (2, 3, 6);
        let shared = feature_tensors(b, t, h, 0.51);
        let zeros = Tensor::zeros(&[b, t, h]);
        let garbage = Tensor::from_fn(&[b, t, h], |i| (i as f32 * 7.7).cos() * 9.0);

        let run = |third: &Tensor<f32>| {
            let mut tape = Tape::new();
            let f = [
                tape.constant(shared[0].clone()),
                tape.constant(shared[1].clone()),
                tape.constant(third.clone()),
            ];
            // Text inactive: caller zeroes it before act in production.
            let zeroed = [f[0], f[1], tape.constant(zeros.clone())];
            let _ = third;
            let actions = m
                .act(&mut tape, &zeroed, &[true, true, false], false, ParamMode::Frozen)
                .unwrap();
            actions.map(|a| tape.value(a).data().to_vec())
        };
        let with_zero = run(&zeros);
        let with_garbage = run(&garbage);
        assert_eq!(with_zero[0], with_garbage[0]);
        assert_eq!(with_zero[1], with_garbage[1]);
        assert!(with_zero[2].iter().all(|&v| v == 1.0));
    }
}
