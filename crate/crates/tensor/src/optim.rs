use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::Float;

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reject non-finite gradients instead of applying them.
    pub strict: bool,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            strict: true,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient. Gradients are left untouched.
    pub fn step<F: Float>(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.strict {
            if let Some(p) = store.iter().find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
                return Err(TensorError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = &p.grad;
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = x.as_f64() * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
                *x = F::cast(upd);
            }
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(stores: &mut [&mut ParamStore<F>], max_norm: f64) -> f64 {
    let total: f64 = stores
        .iter()
        .flat_map(|s| s.iter())
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.iter())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        // g * max / total rather than g * (max / total): exact on small rationals.
        let (max, total_f) = (F::cast(max_norm), F::cast(total));
        for s in stores.iter_mut() {
            for p in s.iter_mut().filter(|p| p.trainable) {
                p.grad.iter_mut().for_each(|g| *g = *g * max / total_f);
            }
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear warmup to `max_lr`, then `gamma` every `decay_every` iters.
    WarmupExponential,
    /// `gamma` every `decay_every` iters from the start.
    StepDecay,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    pub warmup_iters: u64,
    pub decay_gamma: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn warmup_exponential(max_lr: f64, warmup_iters: u64, decay_gamma: f64, decay_every: u64) -> Self {
        Self { kind: ScheduleKind::WarmupExponential, max_lr, warmup_iters, decay_gamma, decay_every }
    }

    pub fn step_decay(max_lr: f64, decay_gamma: f64, decay_every: u64) -> Self {
        Self { kind: ScheduleKind::StepDecay, max_lr, warmup_iters: 0, decay_gamma, decay_every }
    }

    pub fn constant(lr: f64) -> Self {
        Self { kind: ScheduleKind::Constant, max_lr: lr, warmup_iters: 0, decay_gamma: 1.0, decay_every: 1 }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.max_lr,
            ScheduleKind::StepDecay => {
                self.max_lr * self.decay_gamma.powi((iter / self.decay_every.max(1)) as i32)
            }
            ScheduleKind::WarmupExponential => {
                if iter < self.warmup_iters {
                    self.max_lr * iter as f64 / self.warmup_iters as f64
                } else {
                    let k = (iter - self.warmup_iters) / self.decay_every.max(1);
                    self.max_lr * self.decay_gamma.powi(k as i32)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[1], &[p]).unwrap());
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = scalar_store(0.37, 0.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 0.37);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_p() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(0.1, 1e-5);
        opt.step(&mut s).unwrap();
        let p = s.iter().next().unwrap().value.data()[0];
        assert!((p - (2.0 - 0.1 * 1e-5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn single_step_hand_value() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut s).unwrap();
        let p = s.iter().next().unwrap().value.data()[0];
        // m_hat = v_hat = 1 after bias correction: p = 1 - 0.1 / (1 + 1e-8)
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn strict_mode_names_the_bad_parameter() {
        let mut s = scalar_store(1.0, f64::NAN);
        let err = AdamW::new(0.1, 0.0).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn clip_examples() {
        let mut s = scalar_store(0.0, 0.0);
        s.add("q", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        s.iter_mut().nth(1).unwrap().grad.copy_from_slice(&[3.0, 4.0]);
        let n = clip_grad_norm(&mut [&mut s], 3.0);
        assert_eq!(n, 5.0);
        assert_eq!(s.iter().nth(1).unwrap().grad, vec![1.8, 2.4]);

        let mut s = scalar_store(0.0, 2.0);
        clip_grad_norm(&mut [&mut s], 3.0);
        assert_eq!(s.iter().next().unwrap().grad, vec![2.0]);

        let mut s = scalar_store(0.0, 6.0);
        clip_grad_norm(&mut [&mut s], 3.0);
        assert_eq!(s.iter().next().unwrap().grad, vec![3.0]);
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::warmup_exponential(2e-4, 20_000, 0.985, 1000);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(22_000) - 2e-4 * 0.985f64.powi(2)).abs() < 1e-18);
        assert!((s.lr_at(22_000) - 1.94045e-4).abs() < 1e-9);
        let d = LrSchedule::step_decay(1e-3, 0.5, 125_000);
        assert_eq!(d.lr_at(125_000), 5e-4);
        assert_eq!(d.lr_at(124_999), 1e-3);
    }
}
