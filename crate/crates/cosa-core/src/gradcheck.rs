//! Central-difference verification of tape gradients.
//!
//! The check runs at f64: stores are replicated from their f32 values,
//! the loss is rebuilt per perturbation, and analytic gradients are
//! compared entry by entry against `(L(p+h) - L(p-h)) / 2h`.

use crate::params::ParamStore;
use crate::tape::{NodeRef, Tape};
use crate::Result;
use std::collections::HashMap;

/// Builds the scalar loss node for the current parameter values.
pub type LossFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[ParamStore<f64>]) -> Result<NodeRef>;

#[derive(Clone, Debug)]
pub struct EntryError {
    pub store: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    /// Worst relative error seen, with its location.
    pub worst: Option<EntryError>,
    /// Entries exceeding the tolerance.
    pub failures: Vec<EntryError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

pub type GradMap = HashMap<(String, String), Vec<f64>>;

/// Analytic gradients for every parameter of every store, by one
/// forward/backward pass.
pub fn analytic_grads(stores: &[ParamStore<f64>], loss_fn: LossFn) -> Result<GradMap> {
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, stores)?;
    let grads = tape.backward(loss)?;
    let mut map: GradMap = GradMap::new();
    for store in stores {
        for name in store.names() {
            let g = grads
                .get(store.name(), name)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.value(name).len()]);
            map.insert((store.name().to_string(), name.to_string()), g);
        }
    }
    Ok(map)
}

/// Central-difference gradients with step `h`, perturbing one entry at
/// a time.
pub fn numeric_grads(stores: &[ParamStore<f64>], loss_fn: LossFn, h: f64) -> Result<GradMap> {
    let mut map = GradMap::new();
    for si in 0..stores.len() {
        let names: Vec<String> = stores[si].names().map(String::from).collect();
        for name in names {
            let len = stores[si].value(&name).len();
            let mut grad = vec![0.0; len];
            for i in 0..len {
                let eval = |delta: f64| -> Result<f64> {
                    let mut copies: Vec<ParamStore<f64>> =
                        stores.iter().map(|s| s.convert()).collect();
                    let mut v = copies[si].value(&name).clone();
                    v.data_mut()[i] += delta;
                    copies[si].set_value(&name, v);
                    let mut tape = Tape::new();
                    let loss = loss_fn(&mut tape, &copies)?;
                    Ok(tape.value(loss).item())
                };
                grad[i] = (eval(h)? - eval(-h)?) / (2.0 * h);
            }
            map.insert((stores[si].name().to_string(), name), grad);
        }
    }
    Ok(map)
}

/// Compare analytic against numeric gradients entry by entry.
///
/// Relative error uses `max(|a|, |n|, 1e-6)` in the denominator so
/// near-zero gradients compare absolutely.
pub fn compare(analytic: &GradMap, numeric: &GradMap, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut keys: Vec<_> = analytic.keys().collect();
    keys.sort();
    for key in keys {
        let a = &analytic[key];
        let n = numeric.get(key).expect("numeric grads cover analytic keys");
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-6);
            report.entries_checked += 1;
            let entry = EntryError {
                store: key.0.clone(),
                param: key.1.clone(),
                index: i,
                analytic: av,
                numeric: nv,
                rel_err: rel,
            };
            if report.worst.as_ref().map_or(true, |w| rel > w.rel_err) {
                report.worst = Some(entry.clone());
            }
            if rel > tol {
                report.failures.push(entry);
            }
        }
    }
    report
}

/// Full check: analytic vs central differences at step `h`, tolerance `tol`.
///
/// Failures are reported, not raised; an empty parameter set passes.
pub fn grad_check(
    stores: &[ParamStore<f64>],
    loss_fn: LossFn,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(stores, loss_fn)?;
    let numeric = numeric_grads(stores, loss_fn, h)?;
    Ok(compare(&analytic, &numeric, tol))
}
