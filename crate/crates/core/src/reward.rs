//! Token-level reward model: weighted squared-loss training and the per-token
//! reward function used during policy optimization.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::TokenId;
use crate::negatives::{Label, RewardDatum};
use crate::optim::{cosine_lr, loss_and_grads, AdamW, AdamWConfig};
use crate::seeding;
use crate::seqmodel::{self, Bound, HeadKind, ModelError, ModelParams};

/// Reward per generated token past the ground-truth length.
pub const LENGTH_PENALTY: f64 = -2.5;

/// Which position's scalar scores output token `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// The position of token `t` itself, so the score sees the token.
    #[default]
    Inclusive,
    /// The position before token `t`.
    Exclusive,
}

impl Conditioning {
    /// Row of the full `prompt ++ output` sequence that scores output token 0.
    fn first_row(self, prompt_len: usize) -> usize {
        match self {
            Conditioning::Inclusive => prompt_len,
            Conditioning::Exclusive => prompt_len - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
    pub adamw: AdamWConfig,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 1,
            batch_size: 14,
            seed: 0,
            conditioning: Conditioning::Inclusive,
            adamw: AdamWConfig::default(),
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config(format!("reward training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn full_sequence(input: &[TokenId], output: &[TokenId]) -> Vec<TokenId> {
    let mut seq = Vec::with_capacity(input.len() + output.len());
    seq.extend_from_slice(input);
    seq.extend_from_slice(output);
    seq
}

/// `sum_i w_i * sum_t (score_it - target_it)^2 * scale` over `batch`.
pub fn weighted_loss_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    batch: &[&RewardDatum],
    conditioning: Conditioning,
    scale: f64,
) -> Result<Var, ModelError> {
    let mut total: Option<Var> = None;
    for d in batch {
        let ex = &d.example;
        let t = ex.output_tokens.len();
        if t == 0 || d.token_targets.len() != t {
            return Err(ModelError::Contract(format!(
                "datum {} has {} targets for {} tokens",
                ex.id,
                d.token_targets.len(),
                t
            )));
        }
        let seq = full_sequence(&ex.input_tokens, &ex.output_tokens);
        let scores = seqmodel::head_on_tape(tape, params, bound, &seq)?;
        let span = tape.slice_rows(scores, conditioning.first_row(ex.input_tokens.len()), t)?;
        let targets = tape.constant(Tensor::matrix(t, 1, d.token_targets.clone())?);
        let diff = tape.sub(span, targets)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        let term = tape.scale(s, d.weight * scale);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| ModelError::Contract("empty batch".into()))
}

/// One or more epochs of AdamW on the weighted squared loss. The loss of a
/// batch is normalized by its count of output tokens, independent of weights.
pub fn train_reward(
    init: ModelParams,
    data: &[RewardDatum],
    cfg: &RewardTrainConfig,
    mut log: impl FnMut(&RewardLogRow),
) -> Result<ModelParams, ModelError> {
    init.require_head(HeadKind::Scalar)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Contract("no reward data".into()));
    }
    let mut params = init;
    let mut opt = AdamW::new(&params, cfg.adamw);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            order.shuffle(&mut seeding::rng_for(cfg.seed, epoch as u64));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RewardDatum> = chunk.iter().map(|&i| &data[i]).collect();
            let tokens: usize = batch.iter().map(|d| d.token_targets.len()).sum();
            let (loss, grads) = loss_and_grads(&params, |tape, bound| {
                weighted_loss_on_tape(tape, &params, bound, &batch, cfg.conditioning, 1.0 / tokens as f64)
            })?;
            if !loss.is_finite() {
                return Err(ModelError::Contract(format!("non-finite reward loss at step {step}")));
            }
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut params, &grads, lr);
            log(&RewardLogRow { step, loss, lr });
            step += 1;
        }
    }
    Ok(params)
}

/// Unnormalized `sum_i w_i * sum_t (score - target)^2`.
pub fn weighted_squared_error(
    params: &ModelParams,
    data: &[RewardDatum],
    conditioning: Conditioning,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let refs: Vec<&RewardDatum> = data.iter().collect();
    let v = weighted_loss_on_tape(&mut tape, params, &bound, &refs, conditioning, 1.0)?;
    Ok(tape.scalar_value(v))
}

/// Trained reward network plus the length penalty.
#[derive(Debug, Clone)]
pub struct RewardFn {
    pub params: ModelParams,
    pub length_penalty: f64,
    pub output_cap: usize,
    pub conditioning: Conditioning,
}

impl RewardFn {
    pub fn new(params: ModelParams, output_cap: usize) -> Result<Self, ModelError> {
        params.require_head(HeadKind::Scalar)?;
        Ok(Self { params, length_penalty: LENGTH_PENALTY, output_cap, conditioning: Conditioning::Inclusive })
    }

    /// Reward-model score of each output token (no length penalty).
    pub fn token_rewards(&self, input: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        if output.is_empty() {
            return Err(ModelError::Contract("output must contain at least one token".into()));
        }
        let seq = full_sequence(input, output);
        let scores = seqmodel::forward_scalar(&self.params, &seq)?;
        let start = self.conditioning.first_row(input.len());
        Ok(scores[start..start + output.len()].to_vec())
    }

    /// Token rewards with the length penalty applied against `gt_len`.
    pub fn penalized(&self, input: &[TokenId], output: &[TokenId], gt_len: usize) -> Result<Vec<f64>, ModelError> {
        let r = self.token_rewards(input, output)?;
        Ok(apply_length_penalty_with(r, gt_len, self.length_penalty))
    }
}

/// Adds [`LENGTH_PENALTY`] to every reward at index `>= gt_len`.
pub fn apply_length_penalty(rewards: &[f64], out_len: usize, gt_len: usize) -> Result<Vec<f64>, ModelError> {
    if rewards.len() != out_len {
        return Err(ModelError::Contract(format!("{} rewards for output length {out_len}", rewards.len())));
    }
    Ok(apply_length_penalty_with(rewards.to_vec(), gt_len, LENGTH_PENALTY))
}

fn apply_length_penalty_with(mut rewards: Vec<f64>, gt_len: usize, penalty: f64) -> Vec<f64> {
    for r in rewards.iter_mut().skip(gt_len) {
        *r += penalty;
    }
    rewards
}

/// Mean token score per label, pooled over all tokens of that label.
pub fn mean_scores_by_label(
    params: &ModelParams,
    data: &[RewardDatum],
    conditioning: Conditioning,
) -> Result<BTreeMap<Label, f64>, ModelError> {
    let mut sums: BTreeMap<Label, (f64, usize)> = BTreeMap::new();
    for d in data {
        let seq = full_sequence(&d.example.input_tokens, &d.example.output_tokens);
        let scores = seqmodel::forward_scalar(params, &seq)?;
        let start = conditioning.first_row(d.example.input_tokens.len());
        let e = sums.entry(d.label).or_default();
        for s in &scores[start..start + d.example.output_tokens.len()] {
            e.0 += s;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}
