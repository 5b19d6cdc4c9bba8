use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Bias-corrected adaptive-moment optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        AdamState {
            m: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Single-tensor state, used for null-text embedding optimization.
    pub fn for_tensor(t: &Tensor, lr: f32) -> Self {
        AdamState {
            m: vec![vec![0.0; t.numel()]],
            v: vec![vec![0.0; t.numel()]],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole parameter set. `grads` is in the set's
    /// canonical order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != t.numel() {
                return Err(Error::shape("adam_step", format!("grad {} size mismatch", i)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step".into(), phase: "backward" });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = t.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Update a single raw buffer; pairs with `for_tensor`.
    pub fn step_tensor(&mut self, t: &mut Tensor, grad: &[f32]) -> Result<()> {
        if grad.len() != t.numel() {
            return Err(Error::shape("adam_step", "grad size mismatch".to_string()));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step".into(), phase: "backward" });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = &mut self.m[0];
        let v = &mut self.v[0];
        let data = t.data_mut();
        for j in 0..grad.len() {
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![1], vec![value]).unwrap());
        p
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = one_param(1.5);
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..10 {
            st.step(&mut p, &[vec![0.0]]).unwrap();
        }
        assert_eq!(p.get("x").data(), &[1.5]);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn constant_gradient_moves_opposite_sign_bounded_by_lr() {
        let mut p = one_param(0.0);
        let lr = 0.05;
        let mut st = AdamState::new(&p, lr);
        let mut prev = 0.0f32;
        for _ in 0..50 {
            st.step(&mut p, &[vec![2.0]]).unwrap();
            let cur = p.get("x").data()[0];
            let delta = cur - prev;
            assert!(delta < 0.0, "moves opposite to positive gradient");
            assert!(delta.abs() <= lr * 1.001, "bounded update: {delta}");
            prev = cur;
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // loss = (x - 3)^2, gradient 2(x - 3)
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..500 {
            let x = p.get("x").data()[0];
            st.step(&mut p, &[vec![2.0 * (x - 3.0)]]).unwrap();
        }
        let x = p.get("x").data()[0];
        assert!((x - 3.0).abs() < 0.05, "x = {x}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p, 0.1);
        assert!(st.step(&mut p, &[vec![f32::NAN]]).is_err());
    }

    #[test]
    fn grad_shape_mismatch_rejected() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p, 0.1);
        assert!(st.step(&mut p, &[vec![1.0, 2.0]]).is_err());
    }
}
