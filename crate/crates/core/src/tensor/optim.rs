use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// SGD with classic momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(learning_rate: T, momentum: T) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(SgdState { learning_rate, momentum, velocity: Vec::new() })
    }

    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).map(Vec::as_slice)
    }

    /// Applies one update to every trainable parameter holding a gradient, then
    /// clears the gradients. Frozen parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        }
        for (_, p) in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if !p.frozen && g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("gradient of {}", p.name)));
                }
            }
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((_, p), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.len() != p.tensor.numel() {
                return Err(Error::config(format!("velocity buffer of {} has the wrong shape", p.name)));
            }
            if p.frozen {
                p.tensor.zero_grad();
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else { continue };
            let data = p.tensor.data_mut();
            for ((w, vel), gi) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + gi;
                *w -= lr * *vel;
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("conv1_1.weight", Tensor::full([1], value)).unwrap();
        s
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store(1.0);
        let mut opt = SgdState::new(0.1, 0.0).unwrap();
        s.get_mut(s.id("conv1_1.weight").unwrap()).tensor.accumulate_grad(&[1.0]);
        opt.step(&mut s).unwrap();
        assert!((s.by_name("conv1_1.weight").unwrap().tensor.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_unchanged() {
        let mut s = store(1.0);
        let id = s.id("conv1_1.weight").unwrap();
        s.get_mut(id).frozen = true;
        let mut opt = SgdState::new(0.1, 0.9).unwrap();
        s.get_mut(id).tensor.accumulate_grad(&[123.0]);
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(id).item(), 1.0);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = store(0.0);
        let id = s.id("conv1_1.weight").unwrap();
        let mut opt = SgdState::new(1.0, 0.9).unwrap();
        s.get_mut(id).tensor.accumulate_grad(&[1.0]);
        opt.step(&mut s).unwrap();
        assert!((s.tensor(id).item() - -1.0).abs() < 1e-12);
        s.get_mut(id).tensor.accumulate_grad(&[1.0]);
        opt.step(&mut s).unwrap();
        assert!((s.tensor(id).item() - -2.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut s = store(0.0);
        let id = s.id("conv1_1.weight").unwrap();
        s.get_mut(id).tensor.accumulate_grad(&[f64::NAN]);
        let err = SgdState::new(0.1, 0.0).unwrap().step(&mut s).unwrap_err();
        assert!(err.to_string().contains("conv1_1.weight"), "{err}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::<f32>::new(0.0, 0.9).is_err());
        assert!(SgdState::<f32>::new(0.1, 1.0).is_err());
    }
}
