//! Optimizer machinery: decoupled-weight-decay adaptive moments, cosine
//! annealing, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update over flat slices. `t` is the 1-based step count used for
/// bias correction.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
}

/// Adam moments for an encoder parameter tree.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: EncoderParams<f64>,
    pub v: EncoderParams<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams<f64>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Apply one step to a trainable parameter tree. Panics if asked to
    /// update a frozen set — freezing is a hard contract, not a convention.
    pub fn step(
        &mut self,
        params: &mut EncoderParams<f64>,
        grads: &EncoderParams<f64>,
        lr: f64,
        hyper: &AdamHyper,
    ) {
        assert!(params.trainable, "optimizer asked to update a frozen parameter set");
        self.t += 1;
        let t = self.t;
        let g = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            adamw_update(p, g[i].2, ms[i].1, vs[i].1, t, lr, hyper);
        }
    }
}

/// Cosine annealing from `peak` at step 0 to exactly 0 at the final step.
/// Monotone nonincreasing; a single-step schedule stays at the peak.
pub fn cosine_lr(peak: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return peak;
    }
    let frac = step as f64 / (total_steps - 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

/// Scale the gradient tree so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut EncoderParams<f64>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> (EncoderConfig, EncoderParams<f64>) {
        let cfg = EncoderConfig {
            in_leads: 1,
            stem_kernel: 3,
            stage_widths: vec![2, 4],
            blocks_per_stage: 1,
            embed_dim: 4,
            normalize_embeddings: true,
        };
        let p = EncoderParams::<f64>::init(&cfg, 0);
        (cfg, p)
    }

    #[test]
    fn adamw_decoupled_decay_shrinks_params_with_zero_grad() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut m = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        let hyper = AdamHyper {
            weight_decay: 0.1,
            ..AdamHyper::default()
        };
        adamw_update(&mut p, &g, &mut m, &mut v, 1, 0.01, &hyper);
        // pure decay: p -= lr * wd * p
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-12);
        assert!((p[1] + 2.0 * (1.0 - 0.001)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        let mut p = vec![0.5];
        let g = vec![0.3];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let hyper = AdamHyper::default();
        adamw_update(&mut p, &g, &mut m, &mut v, 1, 0.01, &hyper);
        // bias-corrected first step is ~lr * sign(g)
        assert!((p[0] - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        let total = 70u64;
        let peak = 1e-4;
        assert_eq!(cosine_lr(peak, 0, total), peak);
        assert!(cosine_lr(peak, total - 1, total) <= peak * 1e-3);
        let mut prev = f64::INFINITY;
        for s in 0..total {
            let lr = cosine_lr(peak, s, total);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        assert_eq!(cosine_lr(peak, 0, 1), peak);
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let (_, p) = tiny();
        let mut g = p.zeros_like();
        // fill with a known pattern of norm 5
        let total: usize = g.tensors().iter().map(|(_, _, d)| d.len()).sum();
        let val = 5.0 / (total as f64).sqrt();
        for (_, t) in g.tensors_mut() {
            for x in t.iter_mut() {
                *x = val;
            }
        }
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-9);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn optimizer_refuses_frozen_sets() {
        let (_, mut p) = tiny();
        p.trainable = false;
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        st.step(&mut p, &g, 1e-3, &AdamHyper::default());
    }
}
