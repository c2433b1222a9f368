//! AdamW with decoupled weight decay, plus global gradient clipping.
//!
//! The optimizer owns per-parameter moment buffers keyed by position in the
//! registered parameter list. Parameters whose `requires_grad` flag is false
//! are never touched — freezing is enforced here as well as at the tape.
//! A parameter with no gradient buffer is treated as having gradient zero,
//! so decoupled decay still applies to it (matching the scalar trace below).

use crate::num::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second-moment state for one parameter tensor.
struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
}

pub struct AdamW<S: Scalar> {
    cfg: AdamConfig,
    params: Vec<Tensor<S>>,
    states: Vec<AdamState<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    /// Register the parameters this optimizer will update. Tensors that are
    /// frozen at step time are skipped, so it is fine to register everything.
    pub fn new(cfg: AdamConfig, params: Vec<Tensor<S>>) -> Self {
        let states = params
            .iter()
            .map(|p| AdamState { m: vec![S::zero(); p.numel()], v: vec![S::zero(); p.numel()] })
            .collect();
        AdamW { cfg, params, states, step: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drop all registered parameters' gradients.
    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Scale all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&self, max_norm: f64) -> f64 {
        let mut sq = 0.0f64;
        for p in &self.params {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = p.grad() {
                for v in &g {
                    let x = v.as_f64();
                    sq += x * x;
                }
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = S::of_f64(max_norm / norm);
            for p in &self.params {
                if !p.requires_grad() {
                    continue;
                }
                if let Some(mut g) = p.grad() {
                    for v in g.iter_mut() {
                        *v = *v * scale;
                    }
                    p.zero_grad();
                    p.accumulate_grad(&g);
                }
            }
        }
        norm
    }

    /// One AdamW update:
    /// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², bias-corrected, then
    /// θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ). Decay is decoupled from the moments.
    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of_f64(self.cfg.beta1);
        let b2 = S::of_f64(self.cfg.beta2);
        let lr = S::of_f64(self.cfg.lr);
        let eps = S::of_f64(self.cfg.eps);
        let wd = S::of_f64(self.cfg.weight_decay);
        let bc1 = S::one() - S::of_f64(self.cfg.beta1.powi(t));
        let bc2 = S::one() - S::of_f64(self.cfg.beta2.powi(t));
        for (p, st) in self.params.iter().zip(self.states.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map(|g| g[i]).unwrap_or_else(S::zero);
                st.m[i] = b1 * st.m[i] + (S::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (S::one() - b2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        }
    }
}
