//! Central finite-difference verification of backward gradients.

use std::collections::BTreeMap;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries checked.
    pub checked: usize,
    /// Entries whose `±h` probes crossed a `relu`/`abs` kink and were re-probed
    /// with a smaller step.
    pub kinked: usize,
    /// Largest error at the nominal step, kinked entries included.
    pub max_rel_error_at_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinked(&self) -> usize {
        self.entries.iter().map(|e| e.kinked).sum()
    }

    pub fn max_rel_error_at_h(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error_at_h).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn bind<T: Real>(tape: &mut Tape<T>, params: &BTreeMap<String, Tensor<T>>, grad: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), grad)))
        .collect()
}

fn eval<T, F>(params: &BTreeMap<String, Tensor<T>>, build: &F) -> Result<(f64, u64)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let loss = build(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Contract(format!("loss has {} elements", v.len())));
    }
    Ok((v.data()[0].to_f64_lossy(), tape.kink_signature()))
}

/// Smallest step tried when a probe crosses a kink, relative to `h`.
const MIN_STEP_RATIO: f64 = 1e-4;

/// Compares backward gradients of `build_loss` against central differences
/// for every entry of `params`.
///
/// Only the tensors in `params` are perturbed; anything the closure captures
/// (frozen weights, inputs) is treated as a constant and never reported.
/// Relative errors use `floor` as the smallest denominator.
///
/// A probe pair whose `relu`/`abs` sign pattern differs from the unperturbed
/// pass straddles a kink, where central differences do not estimate the
/// derivative. Such entries are re-probed with steps `h/10, h/100, ...` down
/// to `h * 1e-4` until both sides stay on the same piece; `kinked` counts them
/// and `max_rel_error_at_h` keeps their error at the nominal step. If no such
/// step exists the nominal-step result stands.
pub fn gradient_check<T, F>(
    params: &BTreeMap<String, Tensor<T>>,
    build_loss: F,
    h: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, true);
    let loss = build_loss(&mut tape, &vars)?;
    let base = tape.value(loss).data()[0].to_f64_lossy();
    tape.backward(loss)?;

    let (again, signature) = eval(params, &build_loss)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::GradCheckInvalid(format!(
            "two forward passes disagree: {base} vs {again}"
        )));
    }

    let mut entries = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (name, tensor) in params {
        let analytic = tape
            .grad(vars[name])
            .expect("parameter leaves require gradients")
            .into_data();
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: tensor.len(),
            kinked: 0,
            max_rel_error_at_h: 0.0,
        };
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            let mut probe = |step: f64| -> Result<(f64, bool)> {
                let step = T::from_f64_lossy(step);
                work.get_mut(name).unwrap().data_mut()[i] = orig + step;
                let (plus, sp) = eval(&work, &build_loss)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig - step;
                let (minus, sm) = eval(&work, &build_loss)?;
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                // the realised step can differ from h after rounding to T
                let span = (orig + step).to_f64_lossy() - (orig - step).to_f64_lossy();
                Ok(((plus - minus) / span, sp == signature && sm == signature))
            };
            let a = analytic[i].to_f64_lossy();
            let (mut numeric, smooth) = probe(h)?;
            let at_h = relative_error(a, numeric, floor);
            entry.max_rel_error_at_h = entry.max_rel_error_at_h.max(at_h);
            if !smooth {
                entry.kinked += 1;
                let mut step = h;
                while step > h * MIN_STEP_RATIO {
                    step /= 10.0;
                    let (n, ok) = probe(step)?;
                    if ok {
                        numeric = n;
                        break;
                    }
                }
            }
            let err = relative_error(a, numeric, floor);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tol })
}
