use crate::{ParamStore, Result, TensorError};

/// How the learning rate decays over the planned run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `base · (1 − t / total)` evaluated at every optimizer step.
    LinearPerStep,
    /// Same line, but held constant within each epoch.
    LinearPerEpoch { steps_per_epoch: usize },
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global 2-norm ceiling across all gradients; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub total_steps: usize,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            total_steps,
            schedule: LrSchedule::LinearPerStep,
        }
    }
}

/// Rescales every trainable gradient so the global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by the update with zero-based index `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let base = self.cfg.lr;
        let total = self.cfg.total_steps.max(1) as f64;
        match self.cfg.schedule {
            LrSchedule::Constant => base,
            LrSchedule::LinearPerStep => (base * (1.0 - t as f64 / total)).max(0.0),
            LrSchedule::LinearPerEpoch { steps_per_epoch } => {
                let spe = steps_per_epoch.max(1);
                let epochs = self.cfg.total_steps.div_ceil(spe).max(1) as f64;
                (base * (1.0 - (t / spe) as f64 / epochs)).max(0.0)
            }
        }
    }

    /// Clips, applies one Adam update to every trainable parameter, zeroes
    /// the gradients, and returns the learning rate that was used.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if self.step >= self.cfg.total_steps {
            return Err(TensorError::Contract(format!(
                "optimizer already ran its {} planned steps",
                self.cfg.total_steps
            )));
        }
        if store.len() != self.m.len() {
            return Err(TensorError::Contract(
                "parameter store changed after optimizer construction".into(),
            ));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        if let Some(c) = self.cfg.clip_norm {
            clip_grad_norm(store, c);
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(lr)
    }
}
