//! Central finite-difference verification of tape gradients.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries of frozen parameters: analytic gradient reported as zero, no
    /// numeric check performed.
    pub skipped_frozen: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
    pub failures: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every entry of `params`.
///
/// `f` records its computation on the tape it is given and returns the loss
/// handle. The store is restored to its original values before returning.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item();
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    for &id in params {
        let n = store.value(id).numel();
        if store.is_frozen(id) {
            report.skipped_frozen += n;
            continue;
        }
        let analytic = grads
            .param(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for (index, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[index] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[index] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);

            let rel_err = relative_error(a, numeric);
            let entry = EntryCheck {
                param: store.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_err,
            };
            report.checked += 1;
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                report.worst = Some(entry.clone());
            }
            if rel_err > tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}
