//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments mirroring the parameter shapes, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamWState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam step with decoupled decay `θ ← θ − lr·wd·θ`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim("parameters, gradients and moments must pair up"));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::dim(format!(
                "parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 * decay - update) as f32;
        }
    }
    Ok(())
}

/// `lr_min + (lr_max − lr_min)·(1 + cos(π·step/total))/2`, written as a
/// convex combination so both endpoints are reproduced exactly.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Contract(format!("schedule step {step} outside [0, {total}]")));
    }
    let w = (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0;
    Ok(lr_max * w + lr_min * (1.0 - w))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LR_MAX: f64 = 3e-4;
    const LR_MIN: f64 = 1e-6;

    #[test]
    fn schedule_endpoints_are_exact() {
        assert_eq!(cosine_lr(0, 480, LR_MAX, LR_MIN).unwrap(), 3e-4);
        assert_eq!(cosine_lr(480, 480, LR_MAX, LR_MIN).unwrap(), 1e-6);
        let mid = cosine_lr(240, 480, LR_MAX, LR_MIN).unwrap();
        assert!((mid - 1.505e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let total = 997;
        let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(s, total, LR_MAX, LR_MIN).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| (LR_MIN..=LR_MAX).contains(&l)));
    }

    #[test]
    fn schedule_rejects_out_of_range_steps() {
        assert!(matches!(cosine_lr(11, 10, LR_MAX, LR_MIN), Err(Error::Contract(_))));
        assert!(matches!(cosine_lr(0, 0, LR_MAX, LR_MIN), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let orig = p[0].clone();
        let g = vec![Tensor::zeros([3])];
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &g, &mut s, 1e-2, &cfg).unwrap();
        for (a, b) in p[0].data().iter().zip(orig.data()) {
            assert_eq!(*a, (*b as f64 * (1.0 - 1e-2 * 0.01)) as f32);
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn no_decay_no_gradient_is_fixed_point() {
        let mut p = vec![Tensor::new([2], vec![0.3, -0.7]).unwrap()];
        let orig = p.clone();
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        adamw_step(&mut p, &[Tensor::zeros([2])], &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let (theta, g, lr) = (0.8f64, -0.25f64, 1e-3);
        let cfg = AdamWConfig::default();
        let mut p = vec![Tensor::scalar(theta as f32)];
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(g as f32)], &mut s, lr, &cfg).unwrap();
        let expected = theta * (1.0 - lr * cfg.weight_decay) - lr * g / (g.abs() + cfg.eps);
        assert!((p[0].item() as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros([2])];
        let mut s = AdamWState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::zeros([3])], &mut s, 1e-3, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert_eq!(s.t, 0);
    }
}
