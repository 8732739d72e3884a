//! Central finite-difference oracle for tape gradients.

use alloc::string::String;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub loss: f64,
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.value(loss).item()
}

/// Compares the tape gradient of `f` against central differences for every
/// trainable coordinate in `store`.
///
/// `f` builds a scalar loss from the store onto a fresh tape; it must be
/// deterministic, which is checked by evaluating it twice. The store is left
/// with its original values and with the analytic gradients in its buffers.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    finite_difference_check_at(store, eps, |_, _| true, f)
}

/// Like [`finite_difference_check`], but only perturbs the coordinates
/// `(tensor name, flat index)` accepted by `select`.
pub fn finite_difference_check_at<S, F>(store: &mut ParamStore, eps: f64, select: S, mut f: F) -> Result<GradCheckReport>
where
    S: Fn(&str, usize) -> bool,
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(invalid("finite_difference_check", "eps must lie in [1e-7, 1e-4]"));
    }
    let first = eval(store, &mut f)?;
    let second = eval(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        loss: first,
    };
    for id in store.trainable_ids() {
        let n = store.value(id).data().len();
        for i in 0..n {
            if !select(&store.get(id).name, i) {
                continue;
            }
            let analytic = store.grad(id).map_or(0.0, |g| g.data()[i]);
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store, &mut f);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = libm::fabs(analytic - numeric) / libm::fmax(1.0, libm::fabs(numeric));
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = libm::fmax(err, report.max_rel_error);
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2D;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor2D::row_vector(&[3.0]), true);
        let r = finite_difference_check(&mut s, 1e-5, |s, t| {
            let v = t.param(s, x)?;
            let sq = t.mul(v, v)?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(s.grad(x).unwrap().data(), &[6.0]);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor2D::row_vector(&[1.0, -2.0]), true);
        let r = finite_difference_check(&mut s, 1e-5, |_, t| t.constant(Tensor2D::scalar(4.0)))
            .unwrap();
        assert_eq!(s.grad(x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        let mut s = ParamStore::new();
        s.add("x", Tensor2D::row_vector(&[1.0]), true);
        let mut calls = 0.0;
        let r = finite_difference_check(&mut s, 1e-5, |_, t| {
            calls += 1.0;
            t.constant(Tensor2D::scalar(calls))
        });
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_eps() {
        let mut s = ParamStore::new();
        assert!(finite_difference_check(&mut s, 1e-2, |_, t| t.constant(Tensor2D::scalar(0.0))).is_err());
    }
}
