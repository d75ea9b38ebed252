//! CSV exports behind the diagnostics surface: per-frame weight maps,
//! disentangled feature dumps, similarity-vs-interval curves, and
//! prediction dumps.

use crate::data::{Dataset, Labels, Split, MODALITIES};
use crate::dpsr::similarity_by_interval;
use crate::model::CosaModel;
use crate::tape::{ParamMode, Tape};
use crate::trainer::prepared_batches;
use crate::Result;
use std::fmt::Write;

/// Per-frame fusion weights: `sample_id,modality,frame,weight`.
pub fn weights_csv(model: &CosaModel, dataset: &Dataset, split: Split) -> Result<String> {
    let mut out = String::from("sample_id,modality,frame,weight\n");
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        let pass = model.eval_pass(&batch)?;
        let t = batch.seq_len();
        for m in MODALITIES {
            let w = &pass.actions[m.index()];
            for (b, id) in batch.ids.iter().enumerate() {
                for frame in 0..t {
                    writeln!(out, "{id},{m},{frame},{}", w.data()[b * t + frame])
                        .expect("string write");
                }
            }
        }
    }
    Ok(out)
}

/// Disentangled features: one row per `(sample, modality, frame)` with
/// the sentiment and modality feature vectors side by side.
pub fn features_csv(model: &CosaModel, dataset: &Dataset, split: Split) -> Result<String> {
    let h = model.cfg.arch.embed;
    let mut out = String::from("sample_id,modality,frame");
    for k in 0..h {
        write!(out, ",fs_{k}").expect("string write");
    }
    for k in 0..h {
        write!(out, ",fm_{k}").expect("string write");
    }
    out.push('\n');
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        let pass = model.eval_pass(&batch)?;
        let t = batch.seq_len();
        for m in MODALITIES {
            let fs = &pass.sentiment[m.index()];
            let fm = &pass.modality_specific[m.index()];
            for (b, id) in batch.ids.iter().enumerate() {
                for frame in 0..t {
                    write!(out, "{id},{m},{frame}").expect("string write");
                    let row = (b * t + frame) * h;
                    for k in 0..h {
                        write!(out, ",{}", fs.data()[row + k]).expect("string write");
                    }
                    for k in 0..h {
                        write!(out, ",{}", fm.data()[row + k]).expect("string write");
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

/// Mean similarity-vs-interval curves per modality over a split.
/// Returns `[modality][interval-1] = mean cosine`.
pub fn similarity_curves(
    model: &CosaModel,
    dataset: &Dataset,
    split: Split,
    reconstructed: bool,
) -> Result<[Vec<f64>; 3]> {
    let t_len = dataset.manifest.seq_len;
    let mut sums: [Vec<f64>; 3] = [
        vec![0.0; t_len - 1],
        vec![0.0; t_len - 1],
        vec![0.0; t_len - 1],
    ];
    let mut weights = [0usize; 3];
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        // Raw sentiment features or the fusion-side (possibly
        // reconstructed) features.
        let pass = model.eval_pass(&batch)?;
        for m in MODALITIES {
            let i = m.index();
            if !batch.active[i] {
                continue;
            }
            let f = if reconstructed { &pass.features[i] } else { &pass.sentiment[i] };
            let curve = similarity_by_interval(f)?;
            for (s, c) in sums[i].iter_mut().zip(&curve) {
                *s += c * batch.len() as f64;
            }
            weights[i] += batch.len();
        }
    }
    for i in 0..3 {
        let n = weights[i].max(1) as f64;
        for s in sums[i].iter_mut() {
            *s /= n;
        }
    }
    Ok(sums)
}

/// Similarity curves as CSV: `tag,modality,interval,mean_cos`, with a
/// `with_dpsr` tag for the fusion-side features and `without_dpsr` for
/// the raw sentiment features.
pub fn similarity_csv(model: &CosaModel, dataset: &Dataset, split: Split) -> Result<String> {
    let mut out = String::from("tag,modality,interval,mean_cos\n");
    let tagged = [
        ("with_dpsr", model.cfg.modules.dpsr),
        ("without_dpsr", false),
    ];
    for (tag, reconstructed) in tagged {
        if tag == "with_dpsr" && !model.cfg.modules.dpsr {
            // Run has no reconstruction; only the raw curve applies.
            continue;
        }
        let curves = similarity_curves(model, dataset, split, reconstructed)?;
        for m in MODALITIES {
            if !model.cfg.active_modalities()[m.index()] {
                continue;
            }
            for (k, v) in curves[m.index()].iter().enumerate() {
                writeln!(out, "{tag},{m},{},{v}", k + 1).expect("string write");
            }
        }
    }
    Ok(out)
}

/// Prediction dump: `sample_id,y_true,y_pred` for MSA or
/// `sample_id,y_true,logit_0..logit_{C-1}` for MER.
pub fn predictions_csv(model: &CosaModel, dataset: &Dataset, split: Split) -> Result<String> {
    let mut out = String::new();
    let classes = model.classes;
    match model.cfg.task {
        crate::data::TaskKind::Msa => out.push_str("sample_id,y_true,y_pred\n"),
        crate::data::TaskKind::Mer => {
            out.push_str("sample_id,y_true");
            for c in 0..classes {
                write!(out, ",logit_{c}").expect("string write");
            }
            out.push('\n');
        }
    }
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        let pass = model.eval_pass(&batch)?;
        match &batch.labels {
            Labels::Msa(truth) => {
                for (b, id) in batch.ids.iter().enumerate() {
                    writeln!(out, "{id},{},{}", truth[b], pass.predictions.data()[b])
                        .expect("string write");
                }
            }
            Labels::Mer(truth) => {
                for (b, id) in batch.ids.iter().enumerate() {
                    write!(out, "{id},{}", truth[b]).expect("string write");
                    for c in 0..classes {
                        write!(out, ",{}", pass.predictions.data()[b * classes + c])
                            .expect("string write");
                    }
                    out.push('\n');
                }
            }
        }
    }
    Ok(out)
}

/// Modality-classifier probe used by training diagnostics, exposed for
/// external checks: held-out accuracy and mean feature distance.
pub fn msd_probe(model: &CosaModel, dataset: &Dataset, split: Split) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    let mut dist = 0.0;
    let mut n = 0usize;
    for batch in prepared_batches(dataset, split, &model.cfg, None)? {
        let (a, d) = model.msd_diagnostics(&batch)?;
        acc += a * batch.len() as f64;
        dist += d * batch.len() as f64;
        n += batch.len();
    }
    let n = n.max(1) as f64;
    Ok((acc / n, dist / n))
}

/// A model's losses on one batch without gradients; used by tests that
/// inspect individual loss components.
pub fn batch_loss_values(
    model: &CosaModel,
    batch: &crate::data::MultimodalBatch,
) -> Result<crate::trainer::LossRow> {
    let mut tape = Tape::new();
    let bundle = model.losses(&mut tape, batch, ParamMode::Frozen)?;
    let mut row = crate::trainer::LossRow {
        total: tape.value(bundle.total).item() as f64,
        prediction: tape.value(bundle.prediction).item() as f64,
        ..Default::default()
    };
    if let Some(m) = &bundle.msd {
        row.msd = tape.value(m.total).item() as f64;
        if let Some(x) = m.modality {
            row.msd_modality = tape.value(x).item() as f64;
        }
        if let Some(x) = m.reconstruct {
            row.msd_reconstruct = tape.value(x).item() as f64;
        }
        if let Some(x) = m.contrast {
            row.msd_contrast = tape.value(x).item() as f64;
        }
    }
    if let Some(d) = bundle.dpsr {
        row.dpsr = tape.value(d).item() as f64;
    }
    Ok(row)
}
