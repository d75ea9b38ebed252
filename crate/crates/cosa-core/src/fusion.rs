//! Joint representation assembly and prediction heads.

use crate::data::{Labels, TaskKind, MODALITIES};
use crate::module::{Block, LayerSpec, ModuleSpec};
use crate::tape::{NodeRef, ParamMode, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{CosaError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Sum of weighted features over active modalities: `[B, T, h]`.
    Additive,
    /// Feature-axis concatenation in fixed V, A, T order, inactive
    /// modalities contributing zeros: `[B, T, 3h]`.
    Concatenative,
}

/// Combine weighted unimodal features into the joint representation.
pub fn fuse<F: Scalar>(
    tape: &mut Tape<F>,
    weighted: &[NodeRef; 3],
    active: &[bool; 3],
    mode: FusionMode,
) -> Result<NodeRef> {
    if !active.iter().any(|&a| a) {
        return Err(CosaError::Config("fusion needs at least one active modality".into()));
    }
    match mode {
        FusionMode::Additive => {
            let mut acc: Option<NodeRef> = None;
            for m in MODALITIES {
                if !active[m.index()] {
                    continue;
                }
                let f = weighted[m.index()];
                acc = Some(match acc {
                    None => f,
                    Some(prev) => tape.add(prev, f),
                });
            }
            Ok(acc.expect("at least one active modality"))
        }
        FusionMode::Concatenative => {
            let parts: Vec<NodeRef> = MODALITIES
                .into_iter()
                .map(|m| {
                    let f = weighted[m.index()];
                    if active[m.index()] {
                        f
                    } else {
                        tape.constant(Tensor::zeros(tape.shape(f)))
                    }
                })
                .collect();
            Ok(tape.concat_last(&parts))
        }
    }
}

/// Task head: mean-pool over frames, then a two-layer map to the output.
/// Concatenative fusion passes through a width adapter first so both
/// fusion modes share the same head capacity.
pub struct PredictionHead<F = f32> {
    pub adapter: Option<Block<F>>,
    pub head: Block<F>,
    pub task: TaskKind,
    pub classes: usize,
}

impl PredictionHead<f32> {
    pub fn init(
        task: TaskKind,
        classes: usize,
        embed: usize,
        head_hidden: usize,
        mode: FusionMode,
        seed: u64,
    ) -> Self {
        let out = match task {
            TaskKind::Msa => 1,
            TaskKind::Mer => classes,
        };
        let adapter = match mode {
            FusionMode::Additive => None,
            FusionMode::Concatenative => Some(Block::init(
                "fuse.adapter",
                ModuleSpec::new(
                    3 * embed,
                    vec![LayerSpec::Affine { out: embed, zero_init: false }],
                ),
                seed,
            )),
        };
        let head = Block::init(
            "fuse.head",
            ModuleSpec::new(
                embed,
                vec![
                    LayerSpec::MeanFrames,
                    LayerSpec::Affine { out: head_hidden, zero_init: false },
                    LayerSpec::Relu,
                    // Random output layer: predictions depend on the fused
                    // features from the first step, so rewards carry an
                    // action signal before the head has converged.
                    LayerSpec::Affine { out, zero_init: false },
                ],
            ),
            seed,
        );
        Self {
            adapter,
            head,
            task,
            classes,
        }
    }
}

impl<F: Scalar> PredictionHead<F> {
    pub fn convert<G: Scalar>(&self) -> PredictionHead<G> {
        PredictionHead {
            adapter: self.adapter.as_ref().map(|a| a.convert()),
            head: self.head.convert(),
            task: self.task,
            classes: self.classes,
        }
    }

    /// Predictions from the joint representation: `[B]` sentiment values
    /// for MSA (unclamped; clamping only happens inside the Acc7 metric),
    /// `[B, C]` logits for MER.
    pub fn predict(&self, tape: &mut Tape<F>, joint: NodeRef, mode: ParamMode) -> Result<NodeRef> {
        let mut x = joint;
        if let Some(adapter) = &self.adapter {
            x = adapter.forward(tape, x, mode)?;
        }
        let out = self.head.forward(tape, x, mode)?;
        match self.task {
            TaskKind::Msa => {
                let b = tape.shape(out)[0];
                Ok(tape.reshape(out, &[b]))
            }
            TaskKind::Mer => Ok(out),
        }
    }
}

/// Prediction loss: mean absolute error for MSA, mean softmax
/// cross-entropy for MER.
pub fn loss_prediction<F: Scalar>(
    tape: &mut Tape<F>,
    pred: NodeRef,
    labels: &Labels,
) -> Result<NodeRef> {
    match labels {
        Labels::Msa(truth) => {
            if tape.shape(pred) != [truth.len()] {
                return Err(CosaError::Shape(format!(
                    "MSA predictions {:?} vs {} labels",
                    tape.shape(pred),
                    truth.len()
                )));
            }
            let t = Tensor::new(
                vec![truth.len()],
                truth.iter().map(|&v| F::from_f32(v)).collect(),
            )?;
            let truth_node = tape.constant(t);
            let diff = tape.sub(pred, truth_node);
            let abs = tape.abs(diff);
            Ok(tape.mean_all(abs))
        }
        Labels::Mer(truth) => {
            let shape = tape.shape(pred).to_vec();
            if shape.len() != 2 || shape[0] != truth.len() {
                return Err(CosaError::Shape(format!(
                    "MER logits {shape:?} vs {} labels",
                    truth.len()
                )));
            }
            if truth.iter().any(|&c| c >= shape[1]) {
                return Err(CosaError::Config(format!(
                    "MER label out of range for {} classes",
                    shape[1]
                )));
            }
            Ok(tape.cross_entropy(pred, truth))
        }
    }
}
