//! Deep phase-space reconstruction.
//!
//! Each sample's sentiment sequence is rebuilt from its own frame
//! cross-correlations: `W = f_s f_s^T`, `f = W f_s`. A redundancy loss
//! pushes reconstructed frames apart, weighted by the time interval
//! between them so distant pairs are constrained less.

use crate::tape::{NodeRef, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{CosaError, Result};

const COS_EPS: f64 = 1e-8;

/// Temperature of the normalized mixing softmax over cosines.
const MIX_TEMPERATURE: f64 = 0.05;

/// Reconstructed observations and the per-sample correlation matrices.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructedSeq {
    /// `[B, T, h]` reconstructed sequence `W . f_s`.
    pub reconstructed: NodeRef,
    /// `[B, T, T]` symmetric cross-correlation matrices `f_s f_s^T`.
    pub correlation: NodeRef,
}

/// Rebuild every observation from the whole trajectory.
///
/// With `normalize` set, the correlation rows pass through a softmax
/// before the product, so each output frame is a convex mix of frames
/// and feature scale is preserved; the raw product is the default.
pub fn reconstruct_with<F: Scalar>(
    tape: &mut Tape<F>,
    sentiment: NodeRef,
    normalize: bool,
) -> Result<ReconstructedSeq> {
    let shape = tape.shape(sentiment);
    if shape.len() != 3 || shape[1] < 2 {
        return Err(CosaError::Shape(format!(
            "reconstruction needs [B, T>=2, h], got {shape:?}"
        )));
    }
    let correlation = tape.bmm_nt(sentiment, sentiment);
    let mixing = if normalize {
        // Sharpened softmax over the scale-invariant cosine matrix:
        // output frames are convex mixes weighted by similarity rank,
        // so feature magnitude neither explodes nor drowns the
        // structure.
        let cos = cosine_matrix_from(tape, sentiment, correlation);
        let sharp = tape.scalar_mul(cos, 1.0 / MIX_TEMPERATURE);
        tape.softmax_last(sharp)
    } else {
        correlation
    };
    let reconstructed = tape.bmm_nn(mixing, sentiment);
    tape.value(reconstructed).check_finite("phase-space reconstruction")?;
    Ok(ReconstructedSeq {
        reconstructed,
        correlation,
    })
}

/// Raw-correlation reconstruction: `W = f_s f_s^T`, `f = W f_s`.
pub fn reconstruct<F: Scalar>(tape: &mut Tape<F>, sentiment: NodeRef) -> Result<ReconstructedSeq> {
    reconstruct_with(tape, sentiment, false)
}

/// Interval weights `eta[p][q] = T - |p - q|` as an exact `[T, T]` tensor.
pub fn eta_matrix(t_len: usize) -> Tensor<f32> {
    Tensor::from_fn(&[t_len, t_len], |i| {
        let (p, q) = (i / t_len, i % t_len);
        (t_len - p.abs_diff(q)) as f32
    })
}

/// Pairwise cosine matrix of frames: `[B, T, h] -> [B, T, T]`, with the
/// epsilon-guarded denominator (zero frames give cosine 0).
fn cosine_matrix<F: Scalar>(tape: &mut Tape<F>, f: NodeRef) -> NodeRef {
    let dots = tape.bmm_nt(f, f);
    cosine_matrix_from(tape, f, dots)
}

/// Cosines from precomputed pairwise dot products.
fn cosine_matrix_from<F: Scalar>(tape: &mut Tape<F>, f: NodeRef, dots: NodeRef) -> NodeRef {
    let shape = tape.shape(f).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let norms = tape.norm_last(f);
    let norms3 = tape.reshape(norms, &[b, t, 1]);
    let norm_products = tape.bmm_nt(norms3, norms3);
    tape.div_eps(dots, norm_products, COS_EPS)
}

/// Redundancy loss over reconstructed frames.
///
/// Per sample: `(1 / (T (T-1))) * sum over ordered pairs p != q of
/// eta_pq * (cos(f_p, f_q) + 1) / 2`, averaged over the batch. With
/// `use_eta` off every pair weighs 1 and each term lies in `[0, 1]`.
pub fn loss_dpsr<F: Scalar>(tape: &mut Tape<F>, f: NodeRef, use_eta: bool) -> Result<NodeRef> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(CosaError::Shape(format!(
            "redundancy loss needs [B, T>=2, h], got {shape:?}"
        )));
    }
    let (b, t) = (shape[0], shape[1]);
    let cos = cosine_matrix(tape, f);

    // Constant pair weights eta_pq / (2 T (T-1)), zero on the diagonal,
    // tiled over the batch. The "+1" half of each term is constant and
    // folded into `offset`.
    let denom = 2.0 * (t * (t - 1)) as f64;
    let mut offset = 0.0f64;
    let mut base = vec![F::ZERO; t * t];
    for p in 0..t {
        for q in 0..t {
            if p == q {
                continue;
            }
            let eta = if use_eta { (t - p.abs_diff(q)) as f64 } else { 1.0 };
            base[p * t + q] = F::from_f64(eta / denom);
            offset += eta / denom;
        }
    }
    let mut tiled = Vec::with_capacity(b * t * t);
    for _ in 0..b {
        tiled.extend_from_slice(&base);
    }
    let weights = tape.constant(Tensor::new(vec![b, t, t], tiled)?);

    let weighted = tape.mul(cos, weights);
    let sum = tape.sum_all(weighted);
    let mean = tape.scalar_mul(sum, 1.0 / b as f64);
    Ok(tape.add_const(mean, offset))
}

/// Mean cosine similarity between frames at each interval `k = 1..T-1`,
/// over the batch; the diagnostic behind the similarity-vs-interval
/// curves. Runs off-tape in f64.
pub fn similarity_by_interval(f: &Tensor<f32>) -> Result<Vec<f64>> {
    let shape = f.shape();
    if shape.len() != 3 || shape[1] < 2 {
        return Err(CosaError::Shape(format!(
            "similarity diagnostic needs [B, T>=2, h], got {shape:?}"
        )));
    }
    let (b, t, h) = (shape[0], shape[1], shape[2]);
    let mut sums = vec![0.0f64; t - 1];
    let mut counts = vec![0usize; t - 1];
    for bi in 0..b {
        let sample = &f.data()[bi * t * h..(bi + 1) * t * h];
        let norms: Vec<f64> = (0..t)
            .map(|p| {
                sample[p * h..(p + 1) * h]
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for p in 0..t {
            for q in (p + 1)..t {
                let mut dot = 0.0f64;
                for k in 0..h {
                    dot += sample[p * h + k] as f64 * sample[q * h + k] as f64;
                }
                let cos = dot / (norms[p] * norms[q] + COS_EPS);
                sums[q - p - 1] += cos;
                counts[q - p - 1] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect())
}
