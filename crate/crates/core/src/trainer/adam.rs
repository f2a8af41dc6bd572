use super::TrainConfig;
use crate::models::ParamStore;
use crate::tensor::{Element, Tensor};

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, PartialEq)]
pub struct AdamState<T> {
    /// Number of applied updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().clone())).collect();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &[&Tensor<T>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            adam_update(
                params.get_mut(i).data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.t,
                lr,
                cfg,
            );
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_update<T: Element>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, cfg: &TrainConfig) {
    assert!(t >= 1, "Adam steps are numbered from 1");
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(cfg.epsilon);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(g: f64, steps: u64) -> Vec<f64> {
        let cfg = TrainConfig::default();
        let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
        let mut trace = vec![0.0];
        for t in 1..=steps {
            adam_update(&mut p, &[g], &mut m, &mut v, t, 1e-3, &cfg);
            trace.push(p[0]);
        }
        trace
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.02, 1e4] {
            let t = run(g, 1);
            let expect = -1e-3 * g.signum();
            // epsilon perturbs the ratio by about eps / |g|
            assert!((t[1] - expect).abs() < 1e-3 * 1e-6, "{g}: {}", t[1]);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        assert!(run(0.0, 10).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn long_run_step_is_scale_invariant() {
        let a = run(1.0, 201);
        let b = run(10.0, 201);
        let sa = a[201] - a[200];
        let sb = b[201] - b[200];
        assert!(((sa - sb) / sa).abs() < 0.01);
        assert!(sa < 0.0);
    }
}
