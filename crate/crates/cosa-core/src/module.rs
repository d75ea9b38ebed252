//! Declarative layer stacks executed on the tape.
//!
//! A [`ModuleSpec`] lists layers; [`ModuleSpec::init`] materializes a
//! [`ParamStore`] for it and [`ModuleSpec::forward`] runs the stack,
//! recording the computation for gradients. Every learned map in the
//! pipeline (encoders, decoders, classifier, actors, critic, heads) is
//! a configured instance of this one mechanism.

use crate::params::{Init, ParamStore};
use crate::tape::{NodeRef, ParamMode, Tape};
use crate::tensor::Scalar;
use crate::{CosaError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Frame-local affine map to `out` features over the last axis.
    Affine { out: usize, zero_init: bool },
    Relu,
    Sigmoid,
    /// Single residual self-attention block plus feed-forward, over
    /// rank-3 `[B, T, d]` input. Width is preserved.
    SelfAttention { key_dim: usize, ff_hidden: usize },
    /// `[B, T, d] -> [B, d]` mean over frames.
    MeanFrames,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModuleSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Self {
        Self { input_dim, layers }
    }

    /// Two-layer affine+ReLU map `in -> hidden -> out`.
    pub fn mlp2(input_dim: usize, hidden: usize, out: usize) -> Self {
        Self::new(
            input_dim,
            vec![
                LayerSpec::Affine { out: hidden, zero_init: false },
                LayerSpec::Relu,
                LayerSpec::Affine { out, zero_init: false },
            ],
        )
    }

    pub fn output_dim(&self) -> usize {
        let mut d = self.input_dim;
        for layer in &self.layers {
            if let LayerSpec::Affine { out, .. } = layer {
                d = *out;
            }
        }
        d
    }

    /// Create the parameter store for this spec from a named seeded stream.
    pub fn init(&self, store_name: &str, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new(store_name, seed);
        let mut d = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Affine { out, zero_init } => {
                    let init = if *zero_init {
                        Init::Zero
                    } else {
                        Init::UniformFanIn { fan_in: d }
                    };
                    store.add(&format!("l{i}.w"), &[d, *out], init).expect("unique layer names");
                    // Weights carry the seeded fan-in scheme; biases start at zero.
                    store.add(&format!("l{i}.b"), &[*out], Init::Zero).expect("unique layer names");
                    d = *out;
                }
                LayerSpec::SelfAttention { key_dim, ff_hidden } => {
                    let fan = Init::UniformFanIn { fan_in: d };
                    store.add(&format!("l{i}.wq"), &[d, *key_dim], fan).unwrap();
                    store.add(&format!("l{i}.wk"), &[d, *key_dim], fan).unwrap();
                    store.add(&format!("l{i}.wv"), &[d, d], fan).unwrap();
                    store.add(&format!("l{i}.ff1.w"), &[d, *ff_hidden], fan).unwrap();
                    store.add(&format!("l{i}.ff1.b"), &[*ff_hidden], Init::Zero).unwrap();
                    let fan2 = Init::UniformFanIn { fan_in: *ff_hidden };
                    store.add(&format!("l{i}.ff2.w"), &[*ff_hidden, d], fan2).unwrap();
                    store.add(&format!("l{i}.ff2.b"), &[d], Init::Zero).unwrap();
                }
                LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::MeanFrames => {}
            }
        }
        store
    }

    /// Run the stack on `input`, recording onto `tape`.
    ///
    /// The declared output width is checked against what the stack
    /// produced; non-finite outputs are rejected.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        input: NodeRef,
        mode: ParamMode,
    ) -> Result<NodeRef> {
        let in_width = *tape
            .shape(input)
            .last()
            .ok_or_else(|| CosaError::Shape("module input must have rank >= 1".into()))?;
        if in_width != self.input_dim {
            return Err(CosaError::Shape(format!(
                "module expects input width {}, got {} (store {})",
                self.input_dim,
                in_width,
                params.name()
            )));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Affine { .. } => {
                    let w = params.leaf(tape, &format!("l{i}.w"), mode);
                    let b = params.leaf(tape, &format!("l{i}.b"), mode);
                    let y = tape.matmul(x, w);
                    x = tape.add_bias(y, b);
                }
                LayerSpec::Relu => x = tape.relu(x),
                LayerSpec::Sigmoid => x = tape.sigmoid(x),
                LayerSpec::SelfAttention { key_dim, .. } => {
                    if tape.shape(x).len() != 3 {
                        return Err(CosaError::Shape(format!(
                            "self-attention needs [B, T, d] input, got {:?}",
                            tape.shape(x)
                        )));
                    }
                    let wq = params.leaf(tape, &format!("l{i}.wq"), mode);
                    let wk = params.leaf(tape, &format!("l{i}.wk"), mode);
                    let wv = params.leaf(tape, &format!("l{i}.wv"), mode);
                    let q = tape.matmul(x, wq);
                    let k = tape.matmul(x, wk);
                    let v = tape.matmul(x, wv);
                    let scores = tape.bmm_nt(q, k);
                    let scaled = tape.scalar_mul(scores, 1.0 / (*key_dim as f64).sqrt());
                    let attn = tape.softmax_last(scaled);
                    let mixed = tape.bmm_nn(attn, v);
                    let z = tape.add(x, mixed);

                    let f1w = params.leaf(tape, &format!("l{i}.ff1.w"), mode);
                    let f1b = params.leaf(tape, &format!("l{i}.ff1.b"), mode);
                    let f2w = params.leaf(tape, &format!("l{i}.ff2.w"), mode);
                    let f2b = params.leaf(tape, &format!("l{i}.ff2.b"), mode);
                    let h = tape.matmul(z, f1w);
                    let h = tape.add_bias(h, f1b);
                    let h = tape.relu(h);
                    let h = tape.matmul(h, f2w);
                    let h = tape.add_bias(h, f2b);
                    x = tape.add(z, h);
                }
                LayerSpec::MeanFrames => {
                    if tape.shape(x).len() != 3 {
                        return Err(CosaError::Shape(format!(
                            "mean-frames needs [B, T, d] input, got {:?}",
                            tape.shape(x)
                        )));
                    }
                    x = tape.mean_frames(x);
                }
            }
        }
        let got = *tape.shape(x).last().unwrap();
        if got != self.output_dim() {
            return Err(CosaError::Shape(format!(
                "module produced width {}, spec declares {}",
                got,
                self.output_dim()
            )));
        }
        tape.value(x).check_finite(&format!("output of {}", params.name()))?;
        Ok(x)
    }
}

/// A module spec bound to its parameter store.
pub struct Block<F = f32> {
    pub spec: ModuleSpec,
    pub params: ParamStore<F>,
}

impl Block<f32> {
    pub fn init(name: &str, spec: ModuleSpec, seed: u64) -> Self {
        let params = spec.init(name, seed);
        Self { spec, params }
    }
}

impl<F: Scalar> Block<F> {
    pub fn forward(&self, tape: &mut Tape<F>, input: NodeRef, mode: ParamMode) -> Result<NodeRef> {
        self.spec.forward(tape, &self.params, input, mode)
    }

    pub fn convert<G: Scalar>(&self) -> Block<G> {
        Block {
            spec: self.spec.clone(),
            params: self.params.convert(),
        }
    }

    /// Target-network copy: same spec and values under a new store name.
    pub fn clone_as(&self, name: &str) -> Block<F> {
        Block {
            spec: self.spec.clone(),
            params: self.params.clone_as(name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_affine_passes_input_through() {
        let spec = ModuleSpec::new(3, vec![LayerSpec::Affine { out: 3, zero_init: true }]);
        let mut store = spec.init("id", 0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        store.set_value("l0.w", eye);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, -1.0]).unwrap());
        let y = spec.forward(&mut tape, &store, x, ParamMode::Tracked).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn zero_init_final_affine_outputs_zeros() {
        let spec = ModuleSpec::new(
            4,
            vec![
                LayerSpec::Affine { out: 8, zero_init: false },
                LayerSpec::Relu,
                LayerSpec::Affine { out: 2, zero_init: true },
            ],
        );
        let store = spec.init("m", 3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 4], |i| i as f32 * 0.1 - 1.0));
        let y = spec.forward(&mut tape, &store, x, ParamMode::Tracked).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_input_is_bitwise_deterministic() {
        let spec = ModuleSpec::mlp2(6, 8, 4);
        let run = || {
            let store = spec.init("enc", 11);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn(&[3, 6], |i| (i as f32).sin()));
            let y = spec.forward(&mut tape, &store, x, ParamMode::Tracked).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let spec = ModuleSpec::mlp2(6, 8, 4);
        let store = spec.init("enc", 11);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(spec.forward(&mut tape, &store, x, ParamMode::Tracked).is_err());
    }

    #[test]
    fn attention_block_runs_on_rank3_and_rejects_rank2() {
        let spec = ModuleSpec::new(
            5,
            vec![LayerSpec::SelfAttention { key_dim: 4, ff_hidden: 6 }],
        );
        let store = spec.init("critic", 2);
        let mut tape = Tape::<f32>::new();
        let x3 = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f32 * 0.07).cos()));
        let y = spec.forward(&mut tape, &store, x3, ParamMode::Tracked).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 5]);

        let x2 = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(spec.forward(&mut tape, &store, x2, ParamMode::Tracked).is_err());
    }
}
