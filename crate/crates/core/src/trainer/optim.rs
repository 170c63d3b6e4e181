use super::{TrainConfig, TrainError};
use crate::diffcore::{ParamStore, Real, Tensor};

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if step >= cfg.total_steps {
        0.0
    } else {
        cfg.peak_lr * (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .map(|p| p.grad.sum_squares())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    norm
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamW {
            m: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            t: 0,
        }
    }

    /// One update. Leaves everything untouched if any gradient is not finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(TrainError::NanGradient(p.name.clone()));
        }
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1, b2, eps) = (T::of(b1), T::of(b2), T::of(cfg.eps));
        let (lr_t, c1, c2) = (T::of(lr), T::of(c1), T::of(c2));
        let decay = T::one() - T::of(lr * cfg.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                md[i] = b1 * md[i] + (T::one() - b1) * g;
                vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                *theta = *theta * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
