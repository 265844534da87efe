use crate::params::{named_tensors, ParamKind, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup: 20,
            total_steps: 200,
        }
    }
}

/// Linear warmup to `cfg.lr`, then half-cosine decay towards zero.
pub fn cosine_lr(cfg: &OptimConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam. Moments are kept per tensor in visit order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new<P: Params>(params: &P, cfg: OptimConfig) -> Self {
        let zeros: Vec<Tensor> = named_tensors(params)
            .into_iter()
            .map(|(_, t, _)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Tensors for which `trainable`
    /// returns false, and buffers, are left untouched. Weight decay applies
    /// to `ParamKind::Weight` only.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let gs: Vec<&Tensor> = named_tensors(grads).into_iter().map(|(_, t, _)| t).collect();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |name, p, kind| {
            let idx = i;
            i += 1;
            if kind == ParamKind::Buffer || !trainable(&name) {
                return;
            }
            let decay = if kind == ParamKind::Weight { c.weight_decay } else { 0.0 };
            let g = gs[idx].data();
            let m = ms[idx].data_mut();
            let v = vs[idx].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                if lr != 0.0 {
                    let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                    *w -= lr * (update + decay * *w);
                }
            }
        });
    }
}
