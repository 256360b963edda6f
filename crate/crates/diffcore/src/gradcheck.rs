//! Central-difference verification of reverse-mode gradients.

use crate::error::{invalid, DiffError, Result};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};

/// Options for [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size for the central difference.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<EntryCheck>,
    pub entries_checked: usize,
    /// Entries whose perturbation moved some relu/prelu input across zero.
    /// The function is not differentiable along that step, so they are left
    /// out of `max_rel_error`.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.entries_checked > 0 && self.max_rel_error <= tolerance
    }
}

/// One evaluation of the numeric side of a check.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericEval {
    /// Summed after differencing.
    pub terms: Vec<f64>,
    /// Activation pattern of every tape used, see [`Tape::activation_pattern`].
    pub pattern: Vec<bool>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the reverse-mode gradient of every parameter against central
/// differences of the scalar built by `build`.
///
/// `build` must be a pure function of the store: it is re-run twice per
/// checked entry with one entry perturbed.
pub fn finite_difference_check<F>(store: &ParameterStore, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<NumericEval> {
        let mut t = Tape::new();
        let o = build(&mut t, s)?;
        Ok(NumericEval {
            terms: vec![t.value(o).item()],
            pattern: t.activation_pattern(),
        })
    };
    check_gradients(store, &build, eval, opts)
}

/// Like [`finite_difference_check`], but the numeric side differentiates a
/// separate function `numeric`, the sum of the terms it returns.
///
/// Graphs containing gradient reversal or detached leaves have no scalar
/// whose derivative equals their backward pass. Such graphs are checked
/// against a surrogate objective whose true gradient is the intended one,
/// e.g. a sum of terms each evaluated with the other terms' inputs frozen
/// at the original store.
///
/// Terms are differenced one by one before summing, so the round-off of a
/// large term never reaches entries that term does not depend on.
///
/// Both closures may fail with any error type that a [`DiffError`] converts
/// into.
pub fn check_gradients<F, G, E>(store: &ParameterStore, analytic: F, numeric: G, opts: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, E>,
    G: Fn(&ParameterStore) -> Result<NumericEval, E>,
    E: From<DiffError>,
{
    let mut tape = Tape::new();
    let out = analytic(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(invalid("check_gradients", "graph output must be scalar").into());
    }
    tape.backward(out)?;

    let base = numeric(store)?.pattern;
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        kinks_skipped: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name).unwrap().len();
        let grad = tape.param_grad(&name).map(|g| g.data().to_vec());
        let stride = match opts.max_entries_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = store.value(&name).unwrap().data()[idx];
            probe.value_mut(&name).unwrap().data_mut()[idx] = orig + opts.step;
            let up = numeric(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[idx] = orig - opts.step;
            let down = numeric(&probe)?;
            probe.value_mut(&name).unwrap().data_mut()[idx] = orig;

            if up.pattern != base || down.pattern != base {
                report.kinks_skipped += 1;
                continue;
            }
            if up.terms.len() != down.terms.len() {
                return Err(invalid("check_gradients", "numeric terms changed in number").into());
            }
            let fd: f64 = up.terms.iter().zip(&down.terms).map(|(u, d)| (u - d) / (2.0 * opts.step)).sum();
            let a = grad.as_ref().map_or(0.0, |g| g[idx]);
            let rel = relative_error(a, fd, opts.floor);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(EntryCheck {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric: fd,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
