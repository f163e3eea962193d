//! AdamW with decoupled weight decay, plus the learning-rate schedules used
//! by the training loops (one-cycle with cosine ramps, and constant).

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

/// AdamW hyperparameters. Defaults are the conventional ones: β = (0.9,
/// 0.999), ε = 1e-8, weight decay 0.01.
#[derive(Debug, Clone, Copy)]
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

/// AdamW optimizer state over an index-aligned parameter list.
///
/// Moment buffers are allocated on the first step and shape-checked on every
/// later one, so a caller that reorders or resizes its parameters gets a
/// clear error instead of silent corruption.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i] = None` leaves parameter `i` untouched
    /// (no decay either), which is how frozen parameters are expressed.
    pub fn step(
        &mut self,
        params: &mut [&mut Array<T>],
        grads: &[Option<&Array<T>>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Array::zeros(p.shape())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer state holds {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.cfg.beta1), T::from_f64(self.cfg.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.cfg.beta1), T::from_f64(1.0 - self.cfg.beta2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!(
                        "param {} shape {:?}, grad {:?}, state {:?}",
                        i,
                        p.shape(),
                        g.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mhat = m[j].to_f64() / bc1;
                let vhat = v[j].to_f64() / bc2;
                let update = mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * pd[j].to_f64();
                pd[j] = T::from_f64(pd[j].to_f64() - lr * update);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy)]
pub enum LrSchedule {
    /// Fixed learning rate.
    Constant { lr: f64 },
    /// Cosine ramp from `peak/25` up to `peak_lr` over the warmup fraction,
    /// then cosine anneal down to `final_lr` at `total_iters`.
    OneCycle { peak_lr: f64, final_lr: f64, total_iters: u64, warmup_frac: f64 },
}

impl LrSchedule {
    /// Standard one-cycle schedule: warmup over the first 5% of iterations.
    pub fn one_cycle(peak_lr: f64, final_lr: f64, total_iters: u64) -> Self {
        LrSchedule::OneCycle { peak_lr, final_lr, total_iters, warmup_frac: 0.05 }
    }

    /// Learning rate at an iteration index in `0..=total_iters`.
    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::OneCycle { peak_lr, final_lr, total_iters, warmup_frac } => {
                if iter > total_iters {
                    return Err(Error::invalid(format!(
                        "iter {} outside schedule of {} iters",
                        iter, total_iters
                    )));
                }
                let warm = ((total_iters as f64) * warmup_frac).round().max(1.0) as u64;
                let start_lr = peak_lr / 25.0;
                if iter <= warm {
                    let t = iter as f64 / warm as f64;
                    Ok(start_lr
                        + (peak_lr - start_lr) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0)
                } else {
                    let t = (iter - warm) as f64 / (total_iters - warm) as f64;
                    Ok(final_lr
                        + (peak_lr - final_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut opt: AdamW<f64> =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let mut p = Array::from_vec(&[2], vec![1.5, -0.5]).unwrap();
        let g = Array::zeros(&[2]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt: AdamW<f64> = AdamW::new(cfg);
        let mut p = Array::scalar(1.0);
        let g = Array::scalar(0.5);
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        // m̂ = g, v̂ = g² after bias correction at t=1.
        let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.item() - expect).abs() < 1e-12, "{} vs {}", p.item(), expect);
    }

    #[test]
    fn decoupled_decay_shrinks_params_with_zero_grad() {
        let cfg = AdamWConfig { weight_decay: 0.04, ..AdamWConfig::default() };
        let mut opt: AdamW<f64> = AdamW::new(cfg);
        let mut p = Array::scalar(2.0);
        let g = Array::scalar(0.0);
        opt.step(&mut [&mut p], &[Some(&g)], 0.5).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.5 * 0.04)).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_freezes_param() {
        let mut opt: AdamW<f64> = AdamW::new(AdamWConfig::default());
        let mut a = Array::scalar(1.0);
        let mut b = Array::scalar(1.0);
        let g = Array::scalar(0.3);
        opt.step(&mut [&mut a, &mut b], &[Some(&g), None], 0.1).unwrap();
        assert_ne!(a.item(), 1.0);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn one_cycle_hits_peak_and_final() {
        let s = LrSchedule::one_cycle(1e-4, 1e-8, 1000);
        let warm = 50; // 5% of 1000
        assert!((s.lr_at(warm).unwrap() - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(1000).unwrap() - 1e-8).abs() < 1e-18);
        assert!((s.lr_at(0).unwrap() - 1e-4 / 25.0).abs() < 1e-18);
        // Monotone decreasing after the peak.
        let mut prev = s.lr_at(warm).unwrap();
        for i in (warm + 1)..=1000 {
            let lr = s.lr_at(i).unwrap();
            assert!(lr < prev + 1e-20, "not decreasing at {}", i);
            prev = lr;
        }
        let mid = s.lr_at(warm + 475).unwrap();
        assert!(mid < 1e-4 && mid > 1e-8);
        assert!(s.lr_at(1001).is_err());
    }
}
