use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First-moment estimate for parameter index `i`, if it has been updated.
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).filter(|m| !m.is_empty()).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.second.get(i).filter(|m| !m.is_empty()).map(Vec::as_slice)
    }

    /// Applies one update to every parameter that has a gradient, then clears
    /// `grads`. Parameters without a gradient are left untouched. Nothing is
    /// mutated if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut ParamGrads) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}",
                params.get(id).name
            )));
        }
        if self.first.len() < params.len() {
            self.first.resize_with(params.len(), Vec::new);
            self.second.resize_with(params.len(), Vec::new);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let value = params.value_mut(id).data_mut();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            if m.is_empty() {
                m.resize(value.len(), 0.0);
                v.resize(value.len(), 0.0);
            }
            for (((p, &gv), mv), vv) in value.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        grads.clear();
        if !params.all_finite() {
            return Err(Error::NonFinite("parameter after optimizer step".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::row_vector(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = store_with(vec![0.3, -0.2]);
        let id = store.id("p").unwrap();
        let mut adam = Adam::default();
        let mut grads = ParamGrads::new(1);
        grads.slot(id, [1, 2]).copy_from_slice(&[0.0, 0.0]);
        adam.step(&mut store, &mut grads).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -0.2]);
        assert_eq!(adam.first_moment(0).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut store = store_with(vec![1.0]);
        let id = store.id("p").unwrap();
        let mut adam = Adam::default();
        let mut grads = ParamGrads::new(1);
        grads.slot(id, [1, 1])[0] = 2.0;
        adam.step(&mut store, &mut grads).unwrap();
        let m1 = adam.first_moment(0).unwrap()[0];
        let v1 = adam.second_moment(0).unwrap()[0];
        grads.slot(id, [1, 1])[0] = 0.0;
        adam.step(&mut store, &mut grads).unwrap();
        assert_eq!(adam.first_moment(0).unwrap()[0], 0.9 * m1);
        assert_eq!(adam.second_moment(0).unwrap()[0], 0.999 * v1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for g in [3.5, -0.25] {
            let mut store = store_with(vec![0.0]);
            let id = store.id("p").unwrap();
            let mut adam = Adam::new(1e-3);
            let mut grads = ParamGrads::new(1);
            grads.slot(id, [1, 1])[0] = g;
            adam.step(&mut store, &mut grads).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
            assert!((store.value(id).data()[0] + 1e-3 * g.signum()).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_mutation() {
        let mut store = store_with(vec![0.5]);
        let id = store.id("p").unwrap();
        let mut adam = Adam::default();
        let mut grads = ParamGrads::new(1);
        grads.slot(id, [1, 1])[0] = f64::NAN;
        assert!(adam.step(&mut store, &mut grads).is_err());
        assert_eq!(store.value(id).data(), &[0.5]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn grads_are_cleared_after_step() {
        let mut store = store_with(vec![0.5]);
        let id = store.id("p").unwrap();
        let mut adam = Adam::default();
        let mut grads = ParamGrads::new(1);
        grads.slot(id, [1, 1])[0] = 1.0;
        adam.step(&mut store, &mut grads).unwrap();
        assert!(grads.get(id).is_none());
    }
}
