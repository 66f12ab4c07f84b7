use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of warmup steps: `ceil(ratio · total)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_ratio);
    let step = step.min(total_steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_decay(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled decay: `w ← w − lr·wd·w`, then the bias-corrected
/// Adam update.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every tensor in `params` that has a gradient. All gradients
    /// are checked for NaN before anything is modified.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric {
                    op: "adamw_step",
                    detail: format!("NaN gradient for {name}"),
                });
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, w) in params {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != w.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            let w = w.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                w[i] -= lr * c.weight_decay * w[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
