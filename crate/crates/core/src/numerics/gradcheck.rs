//! Central finite-difference verification of reverse-mode gradients.

use super::dd::Dd;
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::rng::Rng;
use super::tape::{Snapshot, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Re-evaluate inconclusive coordinates in double-double precision.
    pub extended_precision: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            coords_per_param: 20,
            seed: 0,
            extended_precision: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a rectifier or clamp kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// f64 differences that already agree this well are not re-evaluated.
const REFINE_ABOVE: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// A scalar loss that can be built on a tape of any precision.
pub trait Objective {
    fn loss<S: Real>(&self, tape: &mut Tape<'_, S>) -> Result<Var>;
}

struct Evaluation<S> {
    loss: S,
    kinks: Vec<bool>,
    snapshot: Snapshot<S>,
}

fn evaluate<S: Real, O: Objective>(
    store: &ParamStore,
    objective: &O,
    offset: Option<(ParamId, usize, f64)>,
    base: Option<&Snapshot<S>>,
) -> Result<Evaluation<S>> {
    let mut tape = Tape::<S>::in_precision(store).with_kink_recording();
    if let Some((id, c, delta)) = offset {
        tape = tape.with_offset(id, c, S::from_f64(delta));
    }
    if let Some(b) = base {
        tape = tape.with_base(b);
    }
    let loss = objective.loss(&mut tape)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NumericInput(format!("loss is {}", v.to_f64())));
    }
    let kinks = tape.kink_signature().to_vec();
    Ok(Evaluation {
        loss: v,
        kinks,
        snapshot: tape.into_snapshot(),
    })
}

/// Central difference for one coordinate, or `None` when either side of
/// the step lands on a different branch of a kink.
fn central_difference<S: Real, O: Objective>(
    store: &ParamStore,
    objective: &O,
    id: ParamId,
    coord: usize,
    step: f64,
    base: &Evaluation<S>,
) -> Result<Option<f64>> {
    let plus = evaluate::<S, O>(store, objective, Some((id, coord, step)), Some(&base.snapshot))?;
    let minus = evaluate::<S, O>(store, objective, Some((id, coord, -step)), Some(&base.snapshot))?;
    if plus.kinks != base.kinks || minus.kinks != base.kinks {
        return Ok(None);
    }
    Ok(Some(((plus.loss - minus.loss) / S::from_f64(2.0 * step)).to_f64()))
}

/// Compares the tape gradient of `objective` against central differences
/// for every trainable parameter in `store`. The objective must be
/// deterministic (dropout off, fixed norm mode).
///
/// Each difference is first taken in `f64`; when that does not already
/// agree with the analytic value to 1e-7, the coordinate is re-evaluated in
/// double-double precision (if `extended_precision` is set) so rounding in
/// the forward pass does not masquerade as a gradient error.
pub fn grad_check<O: Objective>(
    store: &ParamStore,
    objective: &O,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = objective.loss(&mut tape)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NumericInput(format!("loss is {v}")));
        }
        tape.backward(loss)?
    };
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in analytic {
        grads[id.0] = Some(g.into_data());
    }

    let base64 = evaluate::<f64, O>(store, objective, None, None)?;
    let base_dd = if opts.extended_precision {
        Some(evaluate::<Dd, O>(store, objective, None, None)?)
    } else {
        None
    };
    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let coords = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = rng.sample_indices(n, opts.coords_per_param);
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_pair: (0.0, 0.0),
        };
        for c in coords {
            let a = grads[id.0].as_ref().map_or(0.0, |g| g[c]);
            let Some(mut numeric) = central_difference::<f64, O>(store, objective, id, c, opts.step, &base64)?
            else {
                check.skipped += 1;
                continue;
            };
            if let Some(bdd) = base_dd.as_ref().filter(|_| relative_error(a, numeric) > REFINE_ABOVE) {
                match central_difference::<Dd, O>(store, objective, id, c, opts.step, bdd)? {
                    Some(v) => numeric = v,
                    None => {
                        check.skipped += 1;
                        continue;
                    }
                }
            }
            let e = relative_error(a, numeric);
            if e > check.max_rel_error {
                check.max_rel_error = e;
                check.worst_pair = (a, numeric);
            }
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}
