use super::params::ParamStore;

/// `lr(t) = base_lr · (1 − t/max_iter)^power`, clamped to 0 past `max_iter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl PolySchedule {
    pub const DEFAULT_POWER: f64 = 0.9;

    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        Self {
            base_lr,
            power: Self::DEFAULT_POWER,
            max_iter,
        }
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        if self.max_iter == 0 {
            return self.base_lr;
        }
        let frac = (iteration.min(self.max_iter) as f64) / self.max_iter as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Momentum SGD: `buf ← μ·buf + g`, `w ← w − lr·buf`.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64) {
    for p in params.iter_mut() {
        for ((w, g), b) in p.value.iter_mut().zip(&p.grad).zip(p.momentum.iter_mut()) {
            *b = momentum * *b + g;
            *w -= lr * *b;
        }
    }
}
