use super::{DiffError, ParamStore};

/// Adam with bias correction. Moments live here and persist across steps.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, DiffError> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(DiffError::Hyper(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(DiffError::Hyper(format!("betas must lie in [0, 1), got {beta1}, {beta2}")));
        }
        if !(eps > 0.0) {
            return Err(DiffError::Hyper(format!("epsilon must be positive, got {eps}")));
        }
        Ok(Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn with_lr(lr: f64) -> Result<Self, DiffError> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            for id in params.ids() {
                let n = params.value(id).len();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (values, grad) = params.value_and_grad_mut(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
