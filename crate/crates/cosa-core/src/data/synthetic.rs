//! Controllable synthetic datasets.
//!
//! Every sample is built from a latent shared trajectory `s(t)` and one
//! latent unique trajectory `u_i(t)` per modality. Each modality
//! observes an affine mix of `s` and its own `u_i`, plus a fixed
//! modality signature and noise. Labels are deterministic functions of
//! the pooled latents: the MSA label is
//! `clip(w_s . pool(s) + sum_i w_u . pool(u_i), -3, 3)` and the MER
//! label is the argmax over class scores of the same form. With nonzero
//! unique weights on two or more modalities, no single modality carries
//! every latent the label depends on.

use super::manifest::{DatasetManifest, SplitFiles, SplitInfo};
use super::pack::write_pack;
use super::TaskKind;
use crate::params::stream_seed;
use crate::tensor::Tensor;
use crate::{CosaError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

fn default_wiggle_components() -> usize {
    2
}
fn default_nuisance_dim() -> usize {
    2
}
fn default_nuisance_wiggle_scale() -> f64 {
    1.2
}
fn default_wiggle_max_freq() -> f64 {
    2.0
}
fn default_latent_mean_scale() -> f64 {
    1.0
}
fn default_wiggle_scale() -> f64 {
    0.1
}
fn default_signature_scale() -> f64 {
    0.35
}
fn default_feature_scale() -> f64 {
    0.25
}

/// Weights of the label function, drawn once per dataset from the seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelParams {
    /// Norm of the weight vector applied to the pooled shared latent.
    pub shared_weight_scale: f64,
    /// Norm of each per-modality weight vector applied to pooled uniques.
    pub unique_weight_scale: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            shared_weight_scale: 1.6,
            unique_weight_scale: 0.9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seq_len: usize,
    /// Feature widths `[d_v, d_a, d_t]`.
    pub dims: [usize; 3],
    /// Dimension of the shared latent trajectory.
    pub shared_dim: usize,
    /// Dimension of each modality's unique latent trajectory.
    pub unique_dim: usize,
    /// Per-modality label-free latent dimensions: pure band-limited
    /// wiggle with no mean, observed in the features but absent from
    /// the label function.
    #[serde(default = "default_nuisance_dim")]
    pub nuisance_dim: usize,
    /// Wiggle magnitude of the nuisance dimensions.
    #[serde(default = "default_nuisance_wiggle_scale")]
    pub nuisance_wiggle_scale: f64,
    /// Stddev of white observation noise.
    pub noise_scale: f64,
    pub label: LabelParams,
    /// Sinusoid components per latent dimension: the wiggle is
    /// band-limited, so a frame-local map cannot orthogonalize the
    /// frames completely.
    #[serde(default = "default_wiggle_components")]
    pub wiggle_components: usize,
    /// Highest component frequency, in whole cycles per window.
    /// Component frequencies are integers, so every component pools to
    /// exactly zero over the window and the wiggle never leaks into the
    /// pooled label signal.
    #[serde(default = "default_wiggle_max_freq")]
    pub wiggle_max_freq: f64,
    /// Magnitude of the per-sample constant latent mean that carries
    /// the label signal.
    #[serde(default = "default_latent_mean_scale")]
    pub latent_mean_scale: f64,
    /// Stddev of the latent wiggle.
    #[serde(default = "default_wiggle_scale")]
    pub wiggle_scale: f64,
    /// Magnitude of the constant per-modality signature direction.
    #[serde(default = "default_signature_scale")]
    pub signature_scale: f64,
    /// Overall magnitude of the latent part of the observations.
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Msa,
            class_count: None,
            train_size: 2000,
            valid_size: 250,
            test_size: 250,
            seq_len: 20,
            dims: [16, 16, 32],
            shared_dim: 4,
            unique_dim: 2,
            nuisance_dim: default_nuisance_dim(),
            nuisance_wiggle_scale: default_nuisance_wiggle_scale(),
            noise_scale: 0.01,
            label: LabelParams::default(),
            wiggle_components: default_wiggle_components(),
            wiggle_max_freq: default_wiggle_max_freq(),
            latent_mean_scale: default_latent_mean_scale(),
            wiggle_scale: default_wiggle_scale(),
            signature_scale: default_signature_scale(),
            feature_scale: default_feature_scale(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(CosaError::Config("seq_len must be >= 2".into()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(CosaError::Config("feature dims must be positive".into()));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return Err(CosaError::Config("split sizes must be positive".into()));
        }
        if self.shared_dim + self.unique_dim + self.nuisance_dim == 0 {
            return Err(CosaError::Config(
                "need at least one latent dimension".into(),
            ));
        }
        if self.wiggle_components == 0 || self.wiggle_max_freq <= 0.0 {
            return Err(CosaError::Config(
                "wiggle needs at least one component with positive frequency".into(),
            ));
        }
        if self.task == TaskKind::Mer && self.class_count.map_or(true, |c| c < 2) {
            return Err(CosaError::Config("MER needs class_count >= 2".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Standard normal via Box-Muller; one draw per call, deterministic
/// given the rng stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn scaled_to_norm(mut v: Vec<f64>, target: f64) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && target > 0.0 {
        for x in &mut v {
            *x *= target / norm;
        }
    } else {
        for x in &mut v {
            *x = 0.0;
        }
    }
    v
}

/// Dataset-level draws shared by every sample.
struct LabelWeights {
    /// `[class][shared_dim]`; a single pseudo-class for MSA.
    shared: Vec<Vec<f64>>,
    /// `[class][modality][unique_dim]`.
    unique: Vec<[Vec<f64>; 3]>,
}

struct MixingModel {
    /// Per modality: `d_i x (shared_dim + unique_dim)` row-major.
    mix: [Vec<f64>; 3],
    /// Per modality signature direction, length `d_i`.
    signature: [Vec<f64>; 3],
    weights: LabelWeights,
}

fn build_model(spec: &SyntheticSpec) -> MixingModel {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "synthetic.model"));
    let classes = match spec.task {
        TaskKind::Msa => 1,
        TaskKind::Mer => spec.class_count.unwrap_or(2),
    };
    let mut shared = Vec::new();
    let mut unique = Vec::new();
    for _ in 0..classes {
        shared.push(scaled_to_norm(
            normal_vec(&mut rng, spec.shared_dim),
            spec.label.shared_weight_scale,
        ));
        unique.push([
            scaled_to_norm(normal_vec(&mut rng, spec.unique_dim), spec.label.unique_weight_scale),
            scaled_to_norm(normal_vec(&mut rng, spec.unique_dim), spec.label.unique_weight_scale),
            scaled_to_norm(normal_vec(&mut rng, spec.unique_dim), spec.label.unique_weight_scale),
        ]);
    }
    let latent_dim = spec.shared_dim + spec.unique_dim + spec.nuisance_dim;
    let col_scale = 1.0 / (latent_dim as f64).sqrt();
    let mut mix: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut signature: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (m, d) in spec.dims.iter().enumerate() {
        mix[m] = normal_vec(&mut rng, d * latent_dim)
            .into_iter()
            .map(|v| v * col_scale)
            .collect();
        signature[m] = scaled_to_norm(normal_vec(&mut rng, *d), spec.signature_scale);
    }
    MixingModel {
        mix,
        signature,
        weights: LabelWeights { shared, unique },
    }
}

/// Latent trajectory of length `t_len`: a per-sample mean plus a
/// band-limited wiggle (a few random sinusoids), row-major [t_len, dims].
fn latent_trajectory(
    rng: &mut ChaCha8Rng,
    t_len: usize,
    dims: usize,
    spec: &SyntheticSpec,
    mean_scale: f64,
    wiggle_scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; t_len * dims];
    let components = spec.wiggle_components;
    for d in 0..dims {
        let mean = normal(rng) * mean_scale;
        let mut amps = Vec::with_capacity(components);
        let mut freqs = Vec::with_capacity(components);
        let mut phases = Vec::with_capacity(components);
        let top = (spec.wiggle_max_freq.round() as u64).max(1);
        for _ in 0..components {
            amps.push(normal(rng));
            freqs.push(rng.gen_range(1..=top) as f64);
            phases.push(std::f64::consts::TAU * rng.gen::<f64>());
        }
        // Unit-power mix scaled to the requested wiggle magnitude.
        let power: f64 = amps.iter().map(|a| a * a).sum::<f64>() / 2.0;
        let gain = wiggle_scale / power.sqrt().max(1e-9);
        for t in 0..t_len {
            let phase_t = (t as f64 + 0.5) / t_len as f64;
            let mut w = 0.0;
            for c in 0..components {
                w += amps[c] * (std::f64::consts::TAU * freqs[c] * phase_t + phases[c]).sin();
            }
            out[t * dims + d] = mean + gain * w;
        }
    }
    out
}

struct Sample {
    /// Per modality `[T, d_i]`, row-major.
    features: [Vec<f64>; 3],
    label: f64,
}

fn generate_sample(spec: &SyntheticSpec, model: &MixingModel, rng: &mut ChaCha8Rng) -> Sample {
    let t_len = spec.seq_len;
    let ks = spec.shared_dim;
    let ku = spec.unique_dim;
    let kn = spec.nuisance_dim;
    let shared = latent_trajectory(rng, t_len, ks, spec, spec.latent_mean_scale, spec.wiggle_scale);
    let uniques: [Vec<f64>; 3] = [
        latent_trajectory(rng, t_len, ku, spec, spec.latent_mean_scale, spec.wiggle_scale),
        latent_trajectory(rng, t_len, ku, spec, spec.latent_mean_scale, spec.wiggle_scale),
        latent_trajectory(rng, t_len, ku, spec, spec.latent_mean_scale, spec.wiggle_scale),
    ];
    let nuisances: [Vec<f64>; 3] = [
        latent_trajectory(rng, t_len, kn, spec, 0.0, spec.nuisance_wiggle_scale),
        latent_trajectory(rng, t_len, kn, spec, 0.0, spec.nuisance_wiggle_scale),
        latent_trajectory(rng, t_len, kn, spec, 0.0, spec.nuisance_wiggle_scale),
    ];
    let signature_gain = 1.0 + 0.2 * normal(rng);

    let mut features: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let latent_dim = ks + ku + kn;
    for m in 0..3 {
        let d = spec.dims[m];
        let mut x = vec![0.0; t_len * d];
        for t in 0..t_len {
            for j in 0..d {
                let mut acc = 0.0;
                let row = &model.mix[m][j * latent_dim..(j + 1) * latent_dim];
                for (k, &w) in row[..ks].iter().enumerate() {
                    acc += w * shared[t * ks + k];
                }
                for (k, &w) in row[ks..ks + ku].iter().enumerate() {
                    acc += w * uniques[m][t * ku + k];
                }
                for (k, &w) in row[ks + ku..].iter().enumerate() {
                    acc += w * nuisances[m][t * kn + k];
                }
                let noise = if spec.noise_scale > 0.0 {
                    spec.noise_scale * normal(rng)
                } else {
                    // Keep the draw order identical across noise settings.
                    let _ = normal(rng);
                    0.0
                };
                x[t * d + j] = spec.feature_scale * acc
                    + model.signature[m][j] * signature_gain
                    + noise;
            }
        }
        features[m] = x;
    }

    let pool = |traj: &[f64], dims: usize| -> Vec<f64> {
        let mut p = vec![0.0; dims];
        for t in 0..t_len {
            for d in 0..dims {
                p[d] += traj[t * dims + d];
            }
        }
        for v in &mut p {
            *v /= t_len as f64;
        }
        p
    };
    let pooled_s = pool(&shared, ks);
    let pooled_u: [Vec<f64>; 3] = [
        pool(&uniques[0], ku),
        pool(&uniques[1], ku),
        pool(&uniques[2], ku),
    ];

    let score = |class: usize| -> f64 {
        let mut s = 0.0;
        for (w, p) in model.weights.shared[class].iter().zip(&pooled_s) {
            s += w * p;
        }
        for m in 0..3 {
            for (w, p) in model.weights.unique[class][m].iter().zip(&pooled_u[m]) {
                s += w * p;
            }
        }
        s
    };

    let label = match spec.task {
        TaskKind::Msa => score(0).clamp(-3.0, 3.0),
        TaskKind::Mer => {
            let classes = spec.class_count.unwrap_or(2);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..classes {
                let s = score(c);
                if s > best_score {
                    best_score = s;
                    best = c;
                }
            }
            best as f64
        }
    };

    Sample { features, label }
}

/// Generate the three splits under `out_dir` and write `manifest.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CosaError::io(out_dir.display().to_string(), e))?;
    let model = build_model(spec);

    let mut split_infos = Vec::new();
    for (split, size) in [
        ("train", spec.train_size),
        ("valid", spec.valid_size),
        ("test", spec.test_size),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &format!("synthetic.{split}")));
        let t_len = spec.seq_len;
        let mut feats: [Vec<f32>; 3] = [
            Vec::with_capacity(size * t_len * spec.dims[0]),
            Vec::with_capacity(size * t_len * spec.dims[1]),
            Vec::with_capacity(size * t_len * spec.dims[2]),
        ];
        let mut labels: Vec<f32> = Vec::with_capacity(size);
        for _ in 0..size {
            let sample = generate_sample(spec, &model, &mut rng);
            for m in 0..3 {
                feats[m].extend(sample.features[m].iter().map(|&v| v as f32));
            }
            labels.push(sample.label as f32);
        }

        let files = SplitFiles {
            visual: format!("{split}_v.csat"),
            acoustic: format!("{split}_a.csat"),
            text: format!("{split}_t.csat"),
            labels: format!("{split}_y.csat"),
        };
        for (m, file) in [&files.visual, &files.acoustic, &files.text].into_iter().enumerate() {
            let tensor = Tensor::new(vec![size, t_len, spec.dims[m]], std::mem::take(&mut feats[m]))?;
            write_pack(&out_dir.join(file), &tensor)?;
        }
        write_pack(
            &out_dir.join(&files.labels),
            &Tensor::new(vec![size], labels)?,
        )?;
        split_infos.push(SplitInfo { size, files });
    }

    let manifest = DatasetManifest {
        task: spec.task,
        dims: spec.dims,
        seq_len: spec.seq_len,
        class_count: match spec.task {
            TaskKind::Mer => spec.class_count,
            TaskKind::Msa => None,
        },
        test: split_infos.pop().unwrap(),
        valid: split_infos.pop().unwrap(),
        train: split_infos.pop().unwrap(),
        generator_hash: Some(spec.config_hash()),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
