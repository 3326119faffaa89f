//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the one-cycle learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{PulseError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Fixed global-norm gradient clip.
pub const GRAD_CLIP: f64 = 5.0;

/// First/second moment buffers per parameter, in parameter-list order.
pub struct AdamW {
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], weight_decay: f64) -> AdamW {
        AdamW {
            weight_decay,
            step_count: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// One update with bias-corrected moments and decoupled decay. All
    /// gradients must be present and finite (callers clip and screen
    /// first).
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(PulseError::Contract(
                "optimizer state does not match parameter list".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                PulseError::Contract(format!("parameter {name} has no gradient"))
            })?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(PulseError::Overflow(format!(
                    "non-finite gradient on {name}"
                )));
            }
            let mut data = p.data();
            for k in 0..data.len() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = BETA1 * *m + (1.0 - BETA1) * g[k];
                *v = BETA2 * *v + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[k] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * data[k]);
            }
            p.set_data(&data);
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
    for g in grads.iter().flatten() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for ((_, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                p.zero_grad();
                let scaled: Vec<f64> = g.iter().map(|v| v * factor).collect();
                // Re-seed the gradient buffer with the clipped values.
                p.set_grad(&scaled);
            }
        }
    }
    norm
}

/// One-cycle schedule: linear warm-up from peak/25 to peak over the first
/// 30% of steps, then cosine anneal down to peak/1e4.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> f64 {
    assert!(step < total_steps, "step {step} >= total {total_steps}");
    let warm = (0.3 * total_steps as f64).floor() as usize;
    let start = peak_lr / 25.0;
    let floor = peak_lr / 1e4;
    if step < warm {
        return start + (peak_lr - start) * step as f64 / warm as f64;
    }
    let last = total_steps - 1;
    if last == warm {
        return peak_lr;
    }
    let t = (step - warm) as f64 / (last - warm) as f64;
    floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
