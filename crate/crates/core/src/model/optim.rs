use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum SGD or Adam over a flat parameter vector.
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<f32>,
    second: Vec<f32>,
    step: usize,
    total_steps: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize, total_steps: usize) -> Self {
        let second = match cfg.kind {
            OptimizerKind::Adam => vec![0.0; n_params],
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            cfg,
            first: vec![0.0; n_params],
            second,
            step: 0,
            total_steps,
        }
    }

    pub fn current_rate(&self) -> f64 {
        self.cfg.rate_at(self.step, self.total_steps)
    }

    pub fn apply(&mut self, params: &mut [f32], grad: &mut [f32]) {
        debug_assert_eq!(params.len(), grad.len());
        if self.cfg.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| f64::from(*g).powi(2)).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                let s = (self.cfg.clip_norm / norm) as f32;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = self.current_rate() as f32;
        let wd = self.cfg.weight_decay as f32;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum as f32;
                for ((p, g), v) in params.iter_mut().zip(grad.iter()).zip(self.first.iter_mut()) {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        self.step += 1;
    }
}
