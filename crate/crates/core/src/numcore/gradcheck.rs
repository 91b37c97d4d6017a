//! Central finite-difference gradient checker.

use super::param::ParamStore;
use crate::error::Result;

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at `floor` so entries whose true gradient is
/// zero (or below finite-difference resolution) are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Entries whose relative error is at or above the strict tolerance.
    pub above_tol: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn total_entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn total_above_tol(&self) -> usize {
        self.params.iter().map(|p| p.above_tol).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Fraction of entries with relative error below `tol`.
    pub fn pass_fraction(&self) -> f64 {
        let n = self.total_entries();
        if n == 0 {
            return 1.0;
        }
        1.0 - self.total_above_tol() as f64 / n as f64
    }
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Compares each trainable parameter's `grad` field against central
/// differences of `loss` with step `h`.
///
/// `params` must already hold analytic gradients for the current values.
/// Values are restored exactly after each probe.
pub fn finite_diff_check(
    params: &mut ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let ids: Vec<_> = params.ids().filter(|&id| params.get(id).trainable).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        tol,
    };
    for id in ids {
        let n = params.get(id).value.len();
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            entries: n,
            max_rel_error: 0.0,
            above_tol: 0,
        };
        for i in 0..n {
            let original = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = original + h;
            let plus = loss(params)?;
            params.get_mut(id).value.data_mut()[i] = original - h;
            let minus = loss(params)?;
            params.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = params.get(id).grad.data()[i];
            let rel = relative_error(analytic, numeric, DEFAULT_FLOOR);
            check.max_rel_error = check.max_rel_error.max(rel);
            if rel >= tol {
                check.above_tol += 1;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{ops, Grads, Matrix};

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(x · W); dW[i][j] = sum over rows of x[r][i]
        let mut store = ParamStore::new();
        let w = store
            .add("w", Matrix::from_fn(3, 2, |r, c| (r as f64) - 0.5 * c as f64))
            .unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let b = Matrix::zeros(1, 2);
        let y = ops::linear(&x, store.value(w), &b).unwrap();
        let dy = Matrix::filled(y.rows(), y.cols(), 1.0);
        let g = ops::linear_backward(&x, store.value(w), &dy).unwrap();
        let mut grads = Grads::for_store(&store);
        grads.acc(w, &g.dw);
        store.load_grads(&grads);
        let dw = &store.get(w).grad;
        for i in 0..3 {
            let col_sum = x.get(0, i) + x.get(1, i);
            assert_eq!(dw.get(i, 0), col_sum);
            assert_eq!(dw.get(i, 1), col_sum);
        }
        let report = finite_diff_check(
            &mut store,
            |s| Ok(ops::linear(&x, s.value(w), &b)?.sum()),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.total_above_tol(), 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::<f64>::filled(1, 1, 1.0)).unwrap();
        store.get_mut(w).trainable = false;
        let report = finite_diff_check(&mut store, |s| Ok(s.value(w).sum()), 1e-5, 1e-4).unwrap();
        assert!(report.params.is_empty());
    }
}
