//! Learning-rate schedule: linear warmup to a cap, then stepped decay.

/// Defaults reproduce min(i e-3, 4e-3) warmup with quarter decays at epochs
/// 11 and 13 and a floor afterwards.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub base: f64,
    pub cap: f64,
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub max_decays: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base: 1e-3,
            cap: 4e-3,
            decay_start: 11,
            decay_every: 2,
            decay_factor: 0.25,
            max_decays: 2,
        }
    }
}

impl Schedule {
    /// Rate for a 1-based epoch count.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        assert!(epoch >= 1, "epochs count from 1");
        if epoch < self.decay_start {
            return (epoch as f64 * self.base).min(self.cap);
        }
        let steps = ((epoch - self.decay_start) / self.decay_every + 1).min(self.max_decays as usize);
        let mut lr = self.cap;
        for _ in 0..steps {
            lr *= self.decay_factor;
        }
        lr
    }
}
