//! AdamW with a cosine learning-rate schedule, plus the shared step helper
//! the trainers use.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, AutodiffError, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::seqmodel::{Bound, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled weight decay; decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match parameters");
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.shape().len() == 2 { c.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Cosine => cosine_lr(base, step, total),
            LrSchedule::Constant => base,
        }
    }
}

/// Builds a loss with `params` bound as trainable and returns its value and gradients.
pub fn loss_and_grads<F>(params: &ModelParams, build: F) -> Result<(f64, Vec<Tensor>), ModelError>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var, ModelError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = build(&mut tape, &bound)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    Ok((value, params.collect_grads(&bound, &grads)))
}

/// Finite-difference check of a model loss over every parameter tensor.
pub fn grad_check_params<F>(
    params: &ModelParams,
    eps: f64,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var, ModelError>,
{
    grad_check(
        |tape, vars| build(tape, &Bound::from_vars(vars.to_vec())).map_err(|e| AutodiffError::Contract(e.to_string())),
        params.tensors(),
        eps,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{HeadKind, ModelConfig};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let cfg =
            ModelConfig { vocab_size: 4, d_model: 2, layers: 1, heads: 1, d_ff: 2, max_seq: 3, head: HeadKind::Scalar };
        let mut p = ModelParams::init(cfg, 0).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> =
            p.tensors().iter().map(|t| Tensor::new(t.shape().to_vec(), vec![0.5; t.len()]).unwrap()).collect();
        let mut opt = AdamW::new(&p, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut p, &grads, 0.1);
        for (a, b) in before.tensors().iter().zip(p.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 0.1).abs() < 1e-6);
            }
        }
    }
}
