use crate::error::NnError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// Adam with one learning rate per [`crate::ParamGroup`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    /// First moments, one per parameter in store order.
    pub m: Vec<Tensor<f32>>,
    /// Second moments.
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[Tensor<f32>],
    ) -> Result<(), NnError> {
        if grads.len() != store.len() {
            return Err(NnError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(NnError::Shape(format!(
                    "gradient for {} is {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lrs: Vec<f32> = store.groups().iter().map(|g| g.learning_rate).collect();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let lr = lrs[p.group];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(groups: &[(&str, f32)]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (i, (name, lr)) in groups.iter().enumerate() {
            let gi = s.group(name, *lr);
            s.add(format!("p{i}"), gi, Tensor::scalar(0.0));
        }
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // Step 1: mhat = g, vhat = g², update = -lr·g/(|g| + eps).
        for g in [3.0f32, -0.25] {
            let mut s = scalar_store(&[("heads", 1e-3)]);
            let mut adam = Adam::new(&s);
            adam.step(&mut s, &[Tensor::scalar(g)]).unwrap();
            let expected = -1e-3 * g / (g.abs() + EPS);
            assert!((s.params()[0].value.item() - expected).abs() < 1e-7);
            assert_eq!(adam.step, 1);
        }
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters() {
        let mut s = scalar_store(&[("a", 1e-3), ("b", 0.0)]);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::scalar(0.0), Tensor::scalar(5.0)])
            .unwrap();
        assert_eq!(s.params()[0].value.item(), 0.0);
        assert_eq!(s.params()[1].value.item(), 0.0);
    }

    #[test]
    fn two_groups_scale_ten_to_one() {
        let mut s = scalar_store(&[("heads", 1e-4), ("backbone", 1e-5)]);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, &[Tensor::scalar(1.0), Tensor::scalar(1.0)])
            .unwrap();
        let d0 = -s.params()[0].value.item();
        let d1 = -s.params()[1].value.item();
        assert!((d0 / d1 - 10.0).abs() < 1e-2, "ratio {}", d0 / d1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = scalar_store(&[("heads", 1e-3)]);
        let mut adam = Adam::new(&s);
        let err = adam.step(&mut s, &[Tensor::zeros(2, 1)]).unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
    }
}
