//! The assembled pipeline: disentanglement, phase-space reconstruction,
//! agents, fusion, and the prediction head, driven by one config.

use crate::agents::{apply_actions, AgentModel};
use crate::config::TrainConfig;
use crate::data::{MultimodalBatch, TaskKind};
use crate::dpsr;
use crate::fusion::{fuse, loss_prediction, FusionMode, PredictionHead};
use crate::module::{Block, LayerSpec, ModuleSpec};
use crate::msd::{loss_msd, MsdLosses, MsdModel, MsdToggles};
use crate::params::ParamStore;
use crate::tape::{NodeRef, ParamMode, Tape};
use crate::tensor::Tensor;
use crate::{CosaError, Result};

pub struct CosaModel {
    pub msd: MsdModel<f32>,
    pub agents: AgentModel<f32>,
    pub head: PredictionHead<f32>,
    /// Per-frame gate on the fused features; the weighting path when the
    /// agents are disabled.
    pub gate: Block<f32>,
    pub cfg: TrainConfig,
    pub dims: [usize; 3],
    pub classes: usize,
}

/// Scalar loss nodes of the prediction phase, plus the tape nodes the
/// trainer needs downstream.
pub struct LossBundle {
    /// `alpha_1 L_p + alpha_2 L_msd + alpha_3 L_dpsr` (enabled terms only).
    pub total: NodeRef,
    pub prediction: NodeRef,
    pub msd: Option<MsdLosses>,
    pub dpsr: Option<NodeRef>,
    pub predictions: NodeRef,
    pub features: [NodeRef; 3],
}

/// Pure-forward outputs used for rewards, replay, metrics, and exports.
pub struct EvalPass {
    /// Features entering fusion (post-reconstruction when enabled).
    pub features: [Tensor<f32>; 3],
    /// Per-frame weights per modality. With the agents disabled this is
    /// the gate value replicated per modality.
    pub actions: [Tensor<f32>; 3],
    /// `[B]` sentiment values or `[B, C]` logits.
    pub predictions: Tensor<f32>,
    pub sentiment: [Tensor<f32>; 3],
    pub modality_specific: [Tensor<f32>; 3],
}

impl CosaModel {
    pub fn init(cfg: &TrainConfig, dims: [usize; 3], classes: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.task == TaskKind::Mer && classes < 2 {
            return Err(CosaError::Config("MER model needs >= 2 classes".into()));
        }
        let a = &cfg.arch;
        let msd = MsdModel::init(dims, a.enc_hidden, a.embed, cfg.seed);
        let agents = AgentModel::init(a.embed, a.actor_hidden, a.critic_key, a.critic_ff, cfg.seed);
        let head = PredictionHead::init(cfg.task, classes, a.embed, a.head_hidden, cfg.fusion, cfg.seed);
        let gate_width = match cfg.fusion {
            FusionMode::Additive => a.embed,
            FusionMode::Concatenative => 3 * a.embed,
        };
        let gate = Block::init(
            "fuse.gate",
            ModuleSpec::new(
                gate_width,
                vec![LayerSpec::Affine { out: 1, zero_init: true }, LayerSpec::Sigmoid],
            ),
            cfg.seed,
        );
        Ok(Self {
            msd,
            agents,
            head,
            gate,
            cfg: cfg.clone(),
            dims,
            classes,
        })
    }

    fn input_nodes(&self, tape: &mut Tape<f32>, batch: &MultimodalBatch) -> [NodeRef; 3] {
        [0, 1, 2].map(|i| tape.constant(batch.features[i].clone()))
    }

    /// Features entering fusion: encoded sentiment features, passed
    /// through phase-space reconstruction when enabled.
    fn features_on_tape(
        &self,
        tape: &mut Tape<f32>,
        batch: &MultimodalBatch,
        mode: ParamMode,
    ) -> Result<([NodeRef; 3], [crate::msd::DisentangledPair; 3], [NodeRef; 3])> {
        let inputs = self.input_nodes(tape, batch);
        let pairs = self.msd.disentangle(tape, &inputs, &batch.active, mode)?;
        let mut features = Vec::with_capacity(3);
        for (i, pair) in pairs.iter().enumerate() {
            if self.cfg.modules.dpsr && batch.active[i] {
                let rec = dpsr::reconstruct_with(tape, pair.sentiment, self.cfg.normalize_correlation)?;
                features.push(rec.reconstructed);
            } else {
                features.push(pair.sentiment);
            }
        }
        Ok((inputs, pairs, [features[0], features[1], features[2]]))
    }

    /// Per-frame weights computed off-tape from feature values; entering
    /// the prediction phase as constants so no gradient reaches the
    /// actors there.
    fn detached_actions(
        &self,
        features: &[Tensor<f32>; 3],
        active: &[bool; 3],
    ) -> Result<[Tensor<f32>; 3]> {
        let mut scratch = Tape::<f32>::new();
        let nodes = [0, 1, 2].map(|i| scratch.constant(features[i].clone()));
        let actions = self
            .agents
            .act(&mut scratch, &nodes, active, false, ParamMode::Frozen)?;
        Ok([0, 1, 2].map(|i| scratch.value(actions[i]).clone()))
    }

    /// Weight features, fuse, and (with the agents disabled) apply the
    /// learned gate. Returns the joint node plus the gate node when used.
    fn fused_on_tape(
        &self,
        tape: &mut Tape<f32>,
        features: &[NodeRef; 3],
        actions: Option<&[Tensor<f32>; 3]>,
        active: &[bool; 3],
        mode: ParamMode,
    ) -> Result<(NodeRef, Option<NodeRef>)> {
        let joint = if let Some(actions) = actions {
            let consts = [0, 1, 2].map(|i| tape.constant(actions[i].clone()));
            let weighted = apply_actions(tape, features, &consts);
            fuse(tape, &weighted, active, self.cfg.fusion)?
        } else {
            fuse(tape, features, active, self.cfg.fusion)?
        };
        if self.cfg.modules.sac {
            Ok((joint, None))
        } else {
            let raw = self.gate.forward(tape, joint, mode)?;
            let shape = tape.shape(joint).to_vec();
            let gate = tape.reshape(raw, &[shape[0], shape[1]]);
            Ok((tape.scale_frames(joint, gate), Some(gate)))
        }
    }

    /// Build the prediction-phase losses on a tape. `mode` is `Tracked`
    /// for training and `Frozen` for validation passes.
    pub fn losses(
        &self,
        tape: &mut Tape<f32>,
        batch: &MultimodalBatch,
        mode: ParamMode,
    ) -> Result<LossBundle> {
        batch.validate()?;
        let (inputs, pairs, features) = self.features_on_tape(tape, batch, mode)?;

        let actions = if self.cfg.modules.sac {
            let values = [0, 1, 2].map(|i| tape.value(features[i]).clone());
            Some(self.detached_actions(&values, &batch.active)?)
        } else {
            None
        };
        let (joint, _) = self.fused_on_tape(tape, &features, actions.as_ref(), &batch.active, mode)?;
        let predictions = self.head.predict(tape, joint, mode)?;
        let prediction = loss_prediction(tape, predictions, &batch.labels)?;

        let msd = if self.cfg.modules.msd {
            Some(loss_msd(
                tape,
                &self.msd,
                &inputs,
                &pairs,
                &batch.active,
                MsdToggles {
                    use_modality: self.cfg.modules.msd_modality,
                    use_reconstruct: self.cfg.modules.msd_reconstruct,
                    use_contrast: self.cfg.modules.msd_contrast,
                },
                self.cfg.contrast_margin,
                mode,
            )?)
        } else {
            None
        };

        let dpsr_loss = if self.cfg.modules.dpsr {
            let mut terms = Vec::new();
            for (i, &f) in features.iter().enumerate() {
                if batch.active[i] {
                    terms.push(dpsr::loss_dpsr(tape, f, self.cfg.modules.eta)?);
                }
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            Some(tape.scalar_mul(acc, 1.0 / terms.len() as f64))
        } else {
            None
        };

        let mut total = tape.scalar_mul(prediction, self.cfg.alpha[0]);
        if let Some(m) = &msd {
            let w = tape.scalar_mul(m.total, self.cfg.alpha[1]);
            total = tape.add(total, w);
        }
        if let Some(d) = dpsr_loss {
            let w = tape.scalar_mul(d, self.cfg.alpha[2]);
            total = tape.add(total, w);
        }
        Ok(LossBundle {
            total,
            prediction,
            msd,
            dpsr: dpsr_loss,
            predictions,
            features,
        })
    }

    /// Pure forward pass (no gradients) for rewards, replay records,
    /// metrics, and exports.
    pub fn eval_pass(&self, batch: &MultimodalBatch) -> Result<EvalPass> {
        batch.validate()?;
        let mut tape = Tape::<f32>::new();
        let (_, pairs, features) = self.features_on_tape(&mut tape, batch, ParamMode::Frozen)?;
        let feature_values = [0, 1, 2].map(|i| tape.value(features[i]).clone());

        let (actions, joint, gate) = if self.cfg.modules.sac {
            let actions = self.detached_actions(&feature_values, &batch.active)?;
            let (joint, _) = self.fused_on_tape(
                &mut tape,
                &features,
                Some(&actions),
                &batch.active,
                ParamMode::Frozen,
            )?;
            (actions, joint, None)
        } else {
            let (joint, gate) =
                self.fused_on_tape(&mut tape, &features, None, &batch.active, ParamMode::Frozen)?;
            let g = tape.value(gate.expect("gate path")).clone();
            ([g.clone(), g.clone(), g], joint, None::<NodeRef>)
        };
        let _ = gate;
        let predictions = self.head.predict(&mut tape, joint, ParamMode::Frozen)?;
        Ok(EvalPass {
            features: feature_values,
            actions,
            predictions: tape.value(predictions).clone(),
            sentiment: [0, 1, 2].map(|i| tape.value(pairs[i].sentiment).clone()),
            modality_specific: [0, 1, 2].map(|i| tape.value(pairs[i].modality_specific).clone()),
        })
    }

    /// Predictions for explicitly given fusion-side features and
    /// actions (pure forward); the counterfactual pass behind
    /// exploration rewards.
    pub fn predict_with_actions(
        &self,
        features: &[Tensor<f32>; 3],
        actions: &[Tensor<f32>; 3],
        active: &[bool; 3],
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let nodes = [0, 1, 2].map(|i| tape.constant(features[i].clone()));
        let (joint, _) = self.fused_on_tape(&mut tape, &nodes, Some(actions), active, ParamMode::Frozen)?;
        let predictions = self.head.predict(&mut tape, joint, ParamMode::Frozen)?;
        Ok(tape.value(predictions).clone())
    }

    /// Held-out disentanglement probes: modality-classifier accuracy on
    /// modality features and mean sentiment/modality feature distance.
    pub fn msd_diagnostics(&self, batch: &MultimodalBatch) -> Result<(f64, f64)> {
        let pass = self.eval_pass(batch)?;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut dist_sum = 0.0f64;
        let mut dist_count = 0usize;
        let mut tape = Tape::<f32>::new();
        for i in 0..3 {
            if !batch.active[i] {
                continue;
            }
            let fm = tape.constant(pass.modality_specific[i].clone());
            let logits = self.msd.classifier.forward(&mut tape, fm, ParamMode::Frozen)?;
            let v = tape.value(logits);
            for row in v.data().chunks(3) {
                let mut best = 0;
                for (c, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = c;
                    }
                }
                if best == i {
                    correct += 1;
                }
                total += 1;
            }
            let fs = &pass.sentiment[i];
            let h = *fs.shape().last().unwrap();
            for (srow, mrow) in fs.data().chunks(h).zip(pass.modality_specific[i].data().chunks(h)) {
                let sq: f64 = srow
                    .iter()
                    .zip(mrow)
                    .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
                    .sum();
                dist_sum += sq.sqrt();
                dist_count += 1;
            }
        }
        let acc = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
        let dist = if dist_count > 0 { dist_sum / dist_count as f64 } else { 0.0 };
        Ok((acc, dist))
    }

    /// Stores updated by the prediction phase.
    pub fn prediction_stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        let mut stores: Vec<&mut ParamStore<f32>> = Vec::new();
        if self.cfg.modules.msd {
            for b in self.msd.enc_sentiment.iter_mut() {
                stores.push(&mut b.params);
            }
            for b in self.msd.enc_modality.iter_mut() {
                stores.push(&mut b.params);
            }
            for b in self.msd.decoder.iter_mut() {
                stores.push(&mut b.params);
            }
            stores.push(&mut self.msd.classifier.params);
        } else {
            // Sentiment encoders are the representation backbone even
            // when the disentanglement losses are off.
            for b in self.msd.enc_sentiment.iter_mut() {
                stores.push(&mut b.params);
            }
        }
        if let Some(adapter) = self.head.adapter.as_mut() {
            stores.push(&mut adapter.params);
        }
        stores.push(&mut self.head.head.params);
        if !self.cfg.modules.sac {
            stores.push(&mut self.gate.params);
        }
        stores
    }

    pub fn actor_stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        let mut stores: Vec<&mut ParamStore<f32>> = Vec::new();
        for b in self.agents.actors.iter_mut() {
            stores.push(&mut b.params);
        }
        stores.push(&mut self.agents.diff_transform.params);
        stores
    }

    pub fn critic_stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        vec![&mut self.agents.critic.params]
    }

    /// Every store, live and target, for checkpointing.
    pub fn all_stores(&self) -> Vec<&ParamStore<f32>> {
        let mut stores: Vec<&ParamStore<f32>> = Vec::new();
        for b in &self.msd.enc_sentiment {
            stores.push(&b.params);
        }
        for b in &self.msd.enc_modality {
            stores.push(&b.params);
        }
        for b in &self.msd.decoder {
            stores.push(&b.params);
        }
        stores.push(&self.msd.classifier.params);
        if let Some(a) = &self.head.adapter {
            stores.push(&a.params);
        }
        stores.push(&self.head.head.params);
        stores.push(&self.gate.params);
        for b in &self.agents.actors {
            stores.push(&b.params);
        }
        stores.push(&self.agents.diff_transform.params);
        stores.push(&self.agents.critic.params);
        for b in &self.agents.target_actors {
            stores.push(&b.params);
        }
        stores.push(&self.agents.target_diff.params);
        stores.push(&self.agents.target_critic.params);
        stores
    }

    pub fn all_stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        let mut stores: Vec<&mut ParamStore<f32>> = Vec::new();
        for b in self.msd.enc_sentiment.iter_mut() {
            stores.push(&mut b.params);
        }
        for b in self.msd.enc_modality.iter_mut() {
            stores.push(&mut b.params);
        }
        for b in self.msd.decoder.iter_mut() {
            stores.push(&mut b.params);
        }
        stores.push(&mut self.msd.classifier.params);
        if let Some(a) = self.head.adapter.as_mut() {
            stores.push(&mut a.params);
        }
        stores.push(&mut self.head.head.params);
        stores.push(&mut self.gate.params);
        for b in self.agents.actors.iter_mut() {
            stores.push(&mut b.params);
        }
        stores.push(&mut self.agents.diff_transform.params);
        stores.push(&mut self.agents.critic.params);
        for b in self.agents.target_actors.iter_mut() {
            stores.push(&mut b.params);
        }
        stores.push(&mut self.agents.target_diff.params);
        stores.push(&mut self.agents.target_critic.params);
        stores
    }
}
