//! Modality-sentiment disentanglement.
//!
//! Each modality gets a frame-local sentiment encoder and modality
//! encoder; a decoder reconstructs the input from both parts and a
//! shared classifier predicts which modality a modality feature came
//! from. Three losses keep the split honest: modality classification,
//! sentiment/modality contrast, and reconstruction.

use crate::data::{ModalityId, MODALITIES};
use crate::module::{Block, LayerSpec, ModuleSpec};
use crate::tape::{NodeRef, ParamMode, Tape};
use crate::tensor::Scalar;
use crate::{CosaError, Result};

/// Per-modality sentiment and modality features on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledPair {
    pub sentiment: NodeRef,
    pub modality_specific: NodeRef,
    pub modality: ModalityId,
}

pub struct MsdModel<F = f32> {
    pub enc_sentiment: [Block<F>; 3],
    pub enc_modality: [Block<F>; 3],
    pub decoder: [Block<F>; 3],
    pub classifier: Block<F>,
    pub embed: usize,
}

impl MsdModel<f32> {
    /// Frame-local two-layer encoders `d_i -> hidden -> h`, decoders
    /// `2h -> hidden -> d_i`, and a shared single-affine classifier over
    /// pooled modality features.
    pub fn init(dims: [usize; 3], hidden: usize, embed: usize, seed: u64) -> Self {
        let enc = |kind: &str, m: ModalityId, d: usize| {
            Block::init(
                &format!("msd.enc_{kind}.{}", m.short().to_lowercase()),
                ModuleSpec::mlp2(d, hidden, embed),
                seed,
            )
        };
        let dec = |m: ModalityId, d: usize| {
            Block::init(
                &format!("msd.dec.{}", m.short().to_lowercase()),
                ModuleSpec::mlp2(2 * embed, hidden, d),
                seed,
            )
        };
        let classifier = Block::init(
            "msd.clf",
            ModuleSpec::new(
                embed,
                vec![
                    LayerSpec::MeanFrames,
                    LayerSpec::Affine { out: 3, zero_init: true },
                ],
            ),
            seed,
        );
        Self {
            enc_sentiment: [
                enc("s", ModalityId::Visual, dims[0]),
                enc("s", ModalityId::Acoustic, dims[1]),
                enc("s", ModalityId::Text, dims[2]),
            ],
            enc_modality: [
                enc("m", ModalityId::Visual, dims[0]),
                enc("m", ModalityId::Acoustic, dims[1]),
                enc("m", ModalityId::Text, dims[2]),
            ],
            decoder: [
                dec(ModalityId::Visual, dims[0]),
                dec(ModalityId::Acoustic, dims[1]),
                dec(ModalityId::Text, dims[2]),
            ],
            classifier,
            embed,
        }
    }
}

impl<F: Scalar> MsdModel<F> {
    pub fn convert<G: Scalar>(&self) -> MsdModel<G> {
        MsdModel {
            enc_sentiment: [
                self.enc_sentiment[0].convert(),
                self.enc_sentiment[1].convert(),
                self.enc_sentiment[2].convert(),
            ],
            enc_modality: [
                self.enc_modality[0].convert(),
                self.enc_modality[1].convert(),
                self.enc_modality[2].convert(),
            ],
            decoder: [
                self.decoder[0].convert(),
                self.decoder[1].convert(),
                self.decoder[2].convert(),
            ],
            classifier: self.classifier.convert(),
            embed: self.embed,
        }
    }

    /// Frame-local encoding of every modality into sentiment and
    /// modality features of shared width. Inactive modalities are pinned
    /// to zero features (not run through their encoders) so nothing
    /// downstream can depend on them.
    pub fn disentangle(
        &self,
        tape: &mut Tape<F>,
        inputs: &[NodeRef; 3],
        active: &[bool; 3],
        mode: ParamMode,
    ) -> Result<[DisentangledPair; 3]> {
        let mut pairs = Vec::with_capacity(3);
        for m in MODALITIES {
            let i = m.index();
            let (sentiment, modality_specific) = if active[i] {
                (
                    self.enc_sentiment[i].forward(tape, inputs[i], mode)?,
                    self.enc_modality[i].forward(tape, inputs[i], mode)?,
                )
            } else {
                let shape = tape.shape(inputs[i]);
                let zeros = crate::tensor::Tensor::zeros(&[shape[0], shape[1], self.embed]);
                let z = tape.constant(zeros);
                (z, z)
            };
            pairs.push(DisentangledPair {
                sentiment,
                modality_specific,
                modality: m,
            });
        }
        Ok([pairs[0], pairs[1], pairs[2]])
    }
}

fn active_list(active: &[bool; 3]) -> Result<Vec<usize>> {
    let list: Vec<usize> = (0..3).filter(|&i| active[i]).collect();
    if list.is_empty() {
        return Err(CosaError::Config("no active modalities".into()));
    }
    Ok(list)
}

/// Mean frame-wise euclidean distance between two `[B, T, h]` nodes.
fn mean_frame_distance<F: Scalar>(tape: &mut Tape<F>, a: NodeRef, b: NodeRef) -> NodeRef {
    let diff = tape.sub(a, b);
    let norms = tape.norm_last(diff);
    tape.mean_all(norms)
}

/// Average a list of scalar nodes.
fn mean_of<F: Scalar>(tape: &mut Tape<F>, terms: &[NodeRef]) -> NodeRef {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scalar_mul(acc, 1.0 / terms.len() as f64)
}

/// Modality-classification loss: cross-entropy of the shared classifier
/// on pooled modality features against the fixed modality labels
/// (visual 0, acoustic 1, text 2), averaged over active modalities.
pub fn loss_modality<F: Scalar>(
    tape: &mut Tape<F>,
    model: &MsdModel<F>,
    pairs: &[DisentangledPair; 3],
    active: &[bool; 3],
    mode: ParamMode,
) -> Result<NodeRef> {
    let list = active_list(active)?;
    let mut terms = Vec::new();
    for &i in &list {
        let batch = tape.shape(pairs[i].modality_specific)[0];
        let logits = model
            .classifier
            .forward(tape, pairs[i].modality_specific, mode)?;
        let targets = vec![pairs[i].modality.index(); batch];
        terms.push(tape.cross_entropy(logits, &targets));
    }
    Ok(mean_of(tape, &terms))
}

/// Contrast loss: negative mean distance between sentiment and modality
/// features, optionally clamped at `margin` so the push-apart pressure
/// stops growing once the features are far enough.
pub fn loss_contrast<F: Scalar>(
    tape: &mut Tape<F>,
    pairs: &[DisentangledPair; 3],
    active: &[bool; 3],
    margin: Option<f64>,
) -> Result<NodeRef> {
    let list = active_list(active)?;
    let mut terms = Vec::new();
    for &i in &list {
        let mut d = mean_frame_distance(tape, pairs[i].sentiment, pairs[i].modality_specific);
        if let Some(m) = margin {
            d = tape.clamp_max(d, m);
        }
        terms.push(d);
    }
    let mean = mean_of(tape, &terms);
    Ok(tape.scalar_mul(mean, -1.0))
}

/// Reconstruction loss: decode the concatenated pair back to the input
/// space and take the mean frame-wise distance to the original signal.
pub fn loss_reconstruct<F: Scalar>(
    tape: &mut Tape<F>,
    model: &MsdModel<F>,
    inputs: &[NodeRef; 3],
    pairs: &[DisentangledPair; 3],
    active: &[bool; 3],
    mode: ParamMode,
) -> Result<NodeRef> {
    let list = active_list(active)?;
    let mut terms = Vec::new();
    for &i in &list {
        let joint = tape.concat_last(&[pairs[i].sentiment, pairs[i].modality_specific]);
        let reconstructed = model.decoder[i].forward(tape, joint, mode)?;
        if tape.shape(reconstructed) != tape.shape(inputs[i]) {
            return Err(CosaError::Shape(format!(
                "decoder {i} produced {:?}, input is {:?}",
                tape.shape(reconstructed),
                tape.shape(inputs[i])
            )));
        }
        terms.push(mean_frame_distance(tape, inputs[i], reconstructed));
    }
    Ok(mean_of(tape, &terms))
}

/// Which of the three component losses participate (ablation toggles).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsdToggles {
    pub use_modality: bool,
    pub use_reconstruct: bool,
    pub use_contrast: bool,
}

impl Default for MsdToggles {
    fn default() -> Self {
        Self {
            use_modality: true,
            use_reconstruct: true,
            use_contrast: true,
        }
    }
}

/// Component losses plus their sum. Disabled components are `None` and
/// contribute exactly zero.
pub struct MsdLosses {
    pub total: NodeRef,
    pub modality: Option<NodeRef>,
    pub reconstruct: Option<NodeRef>,
    pub contrast: Option<NodeRef>,
}

pub fn loss_msd<F: Scalar>(
    tape: &mut Tape<F>,
    model: &MsdModel<F>,
    inputs: &[NodeRef; 3],
    pairs: &[DisentangledPair; 3],
    active: &[bool; 3],
    toggles: MsdToggles,
    margin: Option<f64>,
    mode: ParamMode,
) -> Result<MsdLosses> {
    let modality = toggles
        .use_modality
        .then(|| loss_modality(tape, model, pairs, active, mode))
        .transpose()?;
    let reconstruct = toggles
        .use_reconstruct
        .then(|| loss_reconstruct(tape, model, inputs, pairs, active, mode))
        .transpose()?;
    let contrast = toggles
        .use_contrast
        .then(|| loss_contrast(tape, pairs, active, margin))
        .transpose()?;
    let mut total = tape.constant(crate::tensor::Tensor::scalar(F::ZERO));
    for part in [modality, reconstruct, contrast].into_iter().flatten() {
        total = tape.add(total, part);
    }
    Ok(MsdLosses {
        total,
        modality,
        reconstruct,
        contrast,
    })
}
