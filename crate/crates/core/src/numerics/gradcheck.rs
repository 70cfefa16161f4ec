use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Entries whose analytic and
/// numeric gradients are both below it are judged on absolute error scaled by
/// this floor.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check every entry when the total is at most this, else sample this many.
    pub max_entries: usize,
    pub seed: u64,
    /// Restrict the check to these parameters.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: 200,
            seed: 0,
            only: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing parameter entries one at a time.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(Error::Invalid(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", g.scalar(loss))));
        }
        g.backward(loss)?
    };

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.ids().collect(),
    };
    let mut entries = Vec::new();
    for &id in &ids {
        for k in 0..store.value(id).len() {
            entries.push((id, k));
        }
    }
    if entries.len() > opts.max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, entries.len(), opts.max_entries).into_vec();
        picked.sort_unstable();
        entries = picked.into_iter().map(|i| entries[i]).collect();
    }

    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tol: opts.tol,
        passed: true,
    };
    for (id, k) in entries {
        let orig = work.value(id).data()[k];
        work.value_mut(id).data_mut()[k] = orig + opts.step;
        let plus = eval(&work)?;
        work.value_mut(id).data_mut()[k] = orig - opts.step;
        let minus = eval(&work)?;
        work.value_mut(id).data_mut()[k] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
        let rel = relative_error(a, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((store.get(id).name.clone(), k));
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn half_squared_norm_has_gradient_p() {
        let mut store = ParamStore::new();
        let p = store
            .add("p", Tensor::row_vector(vec![0.3, -1.2, 2.5, 0.01]))
            .unwrap();
        let report = grad_check(
            &store,
            |g| {
                let v = g.param(p);
                let s = g.sum_squares(v);
                Ok(g.scale(s, 0.5))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-9, "{report:?}");

        let mut g = Graph::new(&store);
        let v = g.param(p);
        let s = g.sum_squares(v);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), store.value(p).data());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(
            &store,
            |g| {
                let v = g.param(p);
                let z = g.scale(v, 0.0);
                let s = g.sum_all(z);
                Ok(g.affine(s, 1.0, 3.0))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_abs_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let store = ParamStore::new();
        let opts = GradCheckOptions {
            step: 0.1,
            ..Default::default()
        };
        assert!(grad_check(&store, |g| Ok(g.constant(Tensor::scalar(0.0))), &opts).is_err());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(
            &store,
            |g| Ok(g.constant(Tensor::scalar(f64::INFINITY))),
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
