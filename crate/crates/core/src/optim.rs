//! Adam with bias correction.

use crate::config::{LrSchedule, TrainConfig};
use crate::error::{MorError, Result};
use crate::tensor::Tensor;

/// First and second moments plus hyperparameters. Moments are kept in the
/// parameter visit order and are always `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            step: 0,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl OptimizerState {
    pub fn from_train_config(t: &TrainConfig) -> Self {
        Self {
            lr: t.lr,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
            ..Self::default()
        }
    }

    /// One update at the base learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        self.step_with_lr(params, grads, self.lr)
    }

    /// One update at learning rate `lr`. Moments are allocated lazily on the
    /// first call; later calls must present the same shapes.
    pub fn step_with_lr(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(MorError::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() && self.step == 0 {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(MorError::Invalid(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.len() != p.len() {
                return Err(MorError::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: self.m[i].shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g[j];
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = md[j] / c1;
                let v_hat = vd[j] / c2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` (0-based) out of `total`.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
            0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_run(p0: f64, grads: &[f64]) -> (f64, OptimizerState) {
        let mut p = Tensor::scalar(p0);
        let mut st = OptimizerState::default();
        for &g in grads {
            st.step(&mut [&mut p], &[&[g]]).unwrap();
        }
        (p.item(), st)
    }

    #[test]
    fn constant_gradient_matches_closed_form() {
        // m̂ = g and v̂ = g² exactly, so every step moves lr·g/(|g|+eps)
        let g = 0.37;
        let (p, st) = scalar_run(1.0, &[g; 25]);
        let expect = 1.0 - 25.0 * 3e-4 * g / (g.abs() + 1e-8);
        assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        assert_eq!(st.step, 25);
    }

    #[test]
    fn matches_hand_recurrence() {
        let grads = [0.5, -1.25, 2.0, 0.0, 1e-3, -0.7];
        let (p, _) = scalar_run(0.2, &grads);
        let (mut q, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            q -= 3e-4 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_from_rest_is_a_fixed_point() {
        let (p, st) = scalar_run(0.75, &[0.0; 4]);
        assert_eq!(p, 0.75);
        assert_eq!(st.m[0].item(), 0.0);
        assert_eq!(st.step, 4);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (_, st) = scalar_run(0.0, &[1.0, 0.0]);
        assert!((st.m[0].item() - 0.09).abs() < 1e-15);
        assert!((st.v[0].item() - 0.000999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimizerState::default();
        assert!(st.step(&mut [&mut p], &[&[1.0]]).is_err());
        st.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let mut q = Tensor::zeros(&[3]);
        assert!(st.step(&mut [&mut q], &[&[1.0, 1.0, 1.0]]).is_err());
        assert!(st.step(&mut [], &[]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(scheduled_lr(1.0, LrSchedule::Cosine, 0, 10), 1.0);
        assert!((scheduled_lr(1.0, LrSchedule::Cosine, 5, 10) - 0.5).abs() < 1e-15);
        assert!(scheduled_lr(1.0, LrSchedule::Cosine, 10, 10).abs() < 1e-15);
        assert_eq!(scheduled_lr(0.3, LrSchedule::Constant, 7, 10), 0.3);
    }
}
