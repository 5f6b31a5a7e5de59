//! Gradient-descent parameter updates.

use crate::{Error, Result};

use super::tensor::Tensor;

/// Update rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Adaptive-moment estimation with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain SGD with momentum.
    Sgd { momentum: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment accumulators plus step count. Deterministic:
/// identical inputs produce identical updates.
pub struct Optimizer {
    method: Method,
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    /// Adam with the default hyperparameters.
    pub fn adam(lr: f64, params: &[Tensor]) -> Self {
        Self::new(Method::adam(), lr, params)
    }

    pub fn new(method: Method, lr: f64, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = match method {
            Method::Adam { .. } => params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            Method::Sgd { .. } => Vec::new(),
        };
        Optimizer { method, lr, step: 0, m, v }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i] == None` means a zero gradient for
    /// parameter `i` (it was not reached by backward).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {i} shape {:?} != accumulator shape {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
            if let Some(g) = grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient {i} shape {:?} != parameter shape {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }

        self.step += 1;
        match self.method {
            Method::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let pd = params[i].data_mut();
                    let md = self.m[i].data_mut();
                    let vd = self.v[i].data_mut();
                    for j in 0..pd.len() {
                        let g = grads[i].map_or(0.0, |g| g.data()[j]) as f64;
                        let m = beta1 * md[j] as f64 + (1.0 - beta1) * g;
                        let v = beta2 * vd[j] as f64 + (1.0 - beta2) * g * g;
                        md[j] = m as f32;
                        vd[j] = v as f32;
                        let mhat = m / bc1;
                        let vhat = v / bc2;
                        pd[j] = (pd[j] as f64 - self.lr * mhat / (vhat.sqrt() + eps)) as f32;
                    }
                }
            }
            Method::Sgd { momentum } => {
                for i in 0..params.len() {
                    let pd = params[i].data_mut();
                    let md = self.m[i].data_mut();
                    for j in 0..pd.len() {
                        let g = grads[i].map_or(0.0, |g| g.data()[j]) as f64;
                        let m = momentum * md[j] as f64 + g;
                        md[j] = m as f32;
                        pd[j] = (pd[j] as f64 - self.lr * m) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let mut opt = Optimizer::adam(1e-2, &params);
        opt.step(&mut params, &[None]).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_adam_step_moves_by_lr_sign() {
        // At t=1 the bias-corrected update is -lr * g / (|g| + eps').
        let mut params = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let g = Tensor::new(vec![2], vec![0.37, -1.9]).unwrap();
        let lr = 1e-3;
        let mut opt = Optimizer::adam(lr, &params);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        assert!((params[0].data()[0] + lr as f32).abs() < 1e-6);
        assert!((params[0].data()[1] - lr as f32).abs() < 1e-6);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
            let mut opt = Optimizer::adam(1e-2, &params);
            for k in 0..10 {
                let g =
                    Tensor::new(vec![2], vec![0.1 * (k as f32 + 1.0), -0.05 * k as f32]).unwrap();
                opt.step(&mut params, &[Some(&g)]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut params = vec![Tensor::new(vec![1], vec![0.0]).unwrap()];
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(Method::Sgd { momentum: 0.5 }, 1.0, &params);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        assert!((params[0].data()[0] + 1.0).abs() < 1e-7);
        opt.step(&mut params, &[Some(&g)]).unwrap();
        // Velocity 1, then 1.5.
        assert!((params[0].data()[0] + 2.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut opt = Optimizer::adam(1e-3, &params);
        let g = Tensor::zeros(&[3]);
        assert!(opt.step(&mut params, &[Some(&g)]).is_err());
    }
}
