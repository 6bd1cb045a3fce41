//! AdamW with bias-corrected moments and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

/// Per-parameter overrides for one update.
#[derive(Clone, Copy, Debug)]
pub struct ParamHyper {
    /// Multiplies the configured learning rate.
    pub lr_scale: f32,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

impl Default for ParamHyper {
    fn default() -> Self {
        ParamHyper {
            lr_scale: 1.0,
            decay: true,
        }
    }
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        AdamW {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with the configured learning rate applied to every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        let hyper = vec![ParamHyper::default(); params.len()];
        self.step_with(params, grads, &hyper)
    }

    /// One update. Rejects the step (leaving parameters and moments untouched)
    /// if any gradient is non-finite.
    pub fn step_with(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        hyper: &[ParamHyper],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || hyper.len() != params.len() {
            return Err(Error::dim(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} hyper, {} moment slots",
                    params.len(),
                    grads.len(),
                    hyper.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at element {bad} is {}; step rejected",
                    g.data()[bad]
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f64, c.beta2 as f64);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = (c.lr * hyper[i].lr_scale) as f64;
            let wd = if hyper[i].decay { c.weight_decay as f64 } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for ((w, g), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = *g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                if lr == 0.0 {
                    continue;
                }
                let mut x = *w as f64;
                x -= lr * wd * x;
                x -= lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps as f64);
                *w = x as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero to `base` over `warmup` steps, then cosine decay
/// to `end` at step `total`.
pub fn cosine_schedule(base: f64, end: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup || step >= total {
        return if total <= warmup { base } else { end };
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    end + 0.5 * (base - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::from_fn(&[3], |i| i as f32 - 1.3);
        let before = p.clone();
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[Tensor::full(&[3], 2.5)]).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = one(1.0);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[one(0.0)]).unwrap();
        assert!((p.item() - 0.999).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        opt.step(&mut [&mut p], &[one(1.0)]).unwrap();
        assert!(((p.item() - 0.5) + 1e-3).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn nan_gradient_rejects_step() {
        let mut p = one(0.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        let err = opt.step(&mut [&mut p], &[one(f32::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.item(), 0.5);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_schedule(1.0, 0.0, 0, 10, 0), 1.0);
        assert!((cosine_schedule(1.0, 0.0, 0, 10, 5) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_schedule(1.0, 0.1, 0, 10, 10), 0.1);
        assert_eq!(cosine_schedule(2.0, 0.0, 4, 10, 1), 1.0);
        assert_eq!(cosine_schedule(2.0, 0.0, 4, 10, 4), 2.0);
    }
}
