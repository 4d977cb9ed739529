use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub const DEFAULT_LR: f64 = 1e-4;

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Slots whose gradient is `None` are left untouched.
    /// Any non-finite gradient aborts before a single value changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "adam over {} tensors with {} gradients",
                store.len(),
                grads.len()
            )));
        }
        for (name, g) in store.names().iter().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((t, g), (m, v)) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scalar(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_scalar(0.7);
        let mut a = AdamState::new(&s, DEFAULT_LR);
        a.step(&mut s, &[Some(Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(s.tensors()[0].data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_scalar(0.0);
        let mut a = AdamState::new(&s, DEFAULT_LR);
        a.step(&mut s, &[Some(Tensor::full(&[1], 1.0))]).unwrap();
        let expected = -DEFAULT_LR / (1.0 + 1e-8);
        assert!((s.tensors()[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_fails_fast() {
        let mut s = one_scalar(1.0);
        let mut a = AdamState::new(&s, DEFAULT_LR);
        let err = a.step(&mut s, &[Some(Tensor::full(&[1], f64::NAN))]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s.tensors()[0].data()[0], 1.0);
        assert_eq!(a.step, 0);
    }
}
