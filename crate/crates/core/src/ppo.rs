//! Proximal policy optimization over token trajectories: hybrid rollouts,
//! generalized advantage estimation, the clipped surrogate and value regression.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Example, ExampleSet, TokenId};
use crate::optim::{cosine_lr, loss_and_grads, AdamW, AdamWConfig};
use crate::reward::RewardFn;
use crate::seeding;
use crate::seqmodel::{self, Bound, HeadKind, ModelError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric instability: {0}")]
    Numeric(String),
    #[error("non-finite value in outer batch {batch}; trajectories: {dump}")]
    NonFinite { batch: usize, dump: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    Sampled,
    GroundTruth,
}

impl RolloutMode {
    /// Even outer batches sample from the policy, odd ones replay ground truth.
    pub fn for_batch(index: usize) -> Self {
        if index.is_multiple_of(2) {
            RolloutMode::Sampled
        } else {
            RolloutMode::GroundTruth
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::Sampled => "sampled",
            RolloutMode::GroundTruth => "ground-truth",
        }
    }
}

/// One episode. `values` has one more entry than `actions`: the last is the
/// prediction for the terminal state, which the returns treat as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub example_id: usize,
    pub input: Vec<TokenId>,
    pub actions: Vec<TokenId>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub source: RolloutMode,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        [&self.old_log_probs, &self.rewards, &self.values, &self.advantages, &self.value_targets]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.input.clone();
        s.extend_from_slice(&self.actions);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub output_cap: usize,
    pub temperature: f64,
    pub normalize_advantages: bool,
    pub adamw: AdamWConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99999,
            lambda: 0.95,
            clip_eps: 0.2,
            batch_size: 7,
            lr: 3e-4,
            value_lr: 3e-4,
            epochs: 1,
            seed: 0,
            output_cap: 100,
            temperature: 1.0,
            normalize_advantages: false,
            adamw: AdamWConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let ok = self.lambda > 0.0
            && self.lambda <= 1.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.clip_eps > 0.0
            && self.batch_size > 0
            && self.lr > 0.0
            && self.value_lr > 0.0
            && self.epochs > 0
            && self.output_cap > 0
            && self.temperature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PpoError::Contract(format!("invalid PPO config {self:?}")))
        }
    }
}

/// Advantages by the backward recursion `A_t = delta_t + gamma * lambda * A_{t+1}`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, PpoError> {
    if values.len() != rewards.len() + 1 {
        return Err(PpoError::Contract(format!("{} values for {} rewards", values.len(), rewards.len())));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// Discounted returns for every state, with a zero target for the terminal state.
pub fn value_targets(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len() + 1];
    for t in (0..rewards.len()).rev() {
        out[t] = rewards[t] + gamma * out[t + 1];
    }
    out
}

fn clipped_terms(w: f64, a: f64, eps: f64) -> (f64, f64) {
    (w * a, w.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Mean over tokens of `min(w A, clip(w, 1 - eps, 1 + eps) A)`.
pub fn ppo_objective(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], eps: f64) -> Result<f64, PpoError> {
    if logp_new.len() != logp_old.len() || logp_new.len() != advantages.len() || logp_new.is_empty() {
        return Err(PpoError::Contract(format!(
            "objective lengths {} / {} / {}",
            logp_new.len(),
            logp_old.len(),
            advantages.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(PpoError::Contract(format!("clip eps {eps}")));
    }
    let mut total = 0.0;
    for ((n, o), a) in logp_new.iter().zip(logp_old).zip(advantages) {
        let w = (n - o).exp();
        if !w.is_finite() {
            return Err(PpoError::Numeric(format!("ratio exp({n} - {o}) is not finite")));
        }
        let (s1, s2) = clipped_terms(w, *a, eps);
        total += s1.min(s2);
    }
    Ok(total / logp_new.len() as f64)
}

/// Mean squared error.
pub fn value_loss(predicted: &[f64], targets: &[f64]) -> Result<f64, PpoError> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(PpoError::Contract(format!("{} predictions for {} targets", predicted.len(), targets.len())));
    }
    Ok(predicted.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / predicted.len() as f64)
}

/// Builds one trajectory per example.
pub fn rollout(
    policy: &ModelParams,
    value: &ModelParams,
    reward: &RewardFn,
    batch: &[&Example],
    mode: RolloutMode,
    seeds: &[u64],
    cfg: &PpoConfig,
) -> Result<Vec<Trajectory>, PpoError> {
    policy.require_head(HeadKind::Logits)?;
    value.require_head(HeadKind::Scalar)?;
    if batch.is_empty() || seeds.len() != batch.len() {
        return Err(PpoError::Contract(format!("{} examples with {} seeds", batch.len(), seeds.len())));
    }
    batch
        .iter()
        .zip(seeds)
        .map(|(ex, &seed)| {
            let actions = match mode {
                RolloutMode::Sampled => {
                    seqmodel::sample(policy, &ex.input_tokens, cfg.output_cap, cfg.temperature, seed)?
                }
                RolloutMode::GroundTruth => ex.output_tokens.clone(),
            };
            if actions.is_empty() {
                return Err(PpoError::Contract(format!("example {} produced no actions", ex.id)));
            }
            let p = ex.input_tokens.len();
            let t = actions.len();
            let mut seq = ex.input_tokens.clone();
            seq.extend_from_slice(&actions);
            let logits = seqmodel::forward_logits(policy, &seq)?;
            let old_log_probs = seqmodel::log_prob(&seqmodel::action_rows(&logits, p, t)?, &actions)?;
            let rewards = reward.penalized(&ex.input_tokens, &actions, ex.output_tokens.len())?;
            let values = seqmodel::forward_scalar(value, &seq)?[p - 1..p + t].to_vec();
            let mut bootstrap = values.clone();
            bootstrap[t] = 0.0;
            let advantages = gae(&rewards, &bootstrap, cfg.gamma, cfg.lambda)?;
            let value_targets = value_targets(&rewards, cfg.gamma);
            Ok(Trajectory {
                example_id: ex.id,
                input: ex.input_tokens.clone(),
                actions,
                old_log_probs,
                rewards,
                values,
                advantages,
                value_targets,
                source: mode,
            })
        })
        .collect()
}

/// Shifts and scales advantages across the batch to zero mean and unit variance.
pub fn normalize_advantages(trajs: &mut [Trajectory]) {
    let all: Vec<f64> = trajs.iter().flat_map(|t| t.advantages.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    for t in trajs {
        for a in &mut t.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
}

/// Tape handles for the surrogate over a batch.
#[derive(Debug, Clone)]
pub struct PolicyTerms {
    /// Mean over all batch tokens of the clipped surrogate.
    pub objective: Var,
    /// Per trajectory: new log-probs, unclipped and clipped branches.
    pub pieces: Vec<(Var, Var, Var)>,
}

pub fn policy_objective_on_tape(
    tape: &mut Tape,
    policy: &ModelParams,
    bound: &Bound,
    trajs: &[Trajectory],
    eps: f64,
) -> Result<PolicyTerms, PpoError> {
    let n: usize = trajs.iter().map(Trajectory::len).sum();
    if n == 0 {
        return Err(PpoError::Contract("no tokens in batch".into()));
    }
    let mut total: Option<Var> = None;
    let mut pieces = Vec::with_capacity(trajs.len());
    for tr in trajs {
        let logits = seqmodel::head_on_tape(tape, policy, bound, &tr.sequence())?;
        let lp = seqmodel::log_prob_on_tape(tape, logits, tr.input.len(), &tr.actions)?;
        let old = tape.constant(Tensor::vector(tr.old_log_probs.clone()));
        let adv = tape.constant(Tensor::vector(tr.advantages.clone()));
        let diff = tape.sub(lp, old).map_err(ModelError::from)?;
        let w = tape.exp(diff);
        let s1 = tape.mul(w, adv).map_err(ModelError::from)?;
        let wc = tape.clamp(w, 1.0 - eps, 1.0 + eps);
        let s2 = tape.mul(wc, adv).map_err(ModelError::from)?;
        let m = tape.minimum(s1, s2).map_err(ModelError::from)?;
        let s = tape.sum(m);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s).map_err(ModelError::from)?,
        });
        pieces.push((lp, s1, s2));
    }
    let objective = tape.scale(total.expect("non-empty batch"), 1.0 / n as f64);
    Ok(PolicyTerms { objective, pieces })
}

/// Mean squared error between value predictions and targets over every state of the batch.
pub fn value_loss_on_tape(
    tape: &mut Tape,
    value: &ModelParams,
    bound: &Bound,
    trajs: &[Trajectory],
) -> Result<Var, PpoError> {
    let n: usize = trajs.iter().map(|t| t.len() + 1).sum();
    let mut total: Option<Var> = None;
    for tr in trajs {
        let scores = seqmodel::head_on_tape(tape, value, bound, &tr.sequence())?;
        let states = tape.slice_rows(scores, tr.input.len() - 1, tr.len() + 1).map_err(ModelError::from)?;
        let target =
            tape.constant(Tensor::matrix(tr.len() + 1, 1, tr.value_targets.clone()).map_err(ModelError::from)?);
        let diff = tape.sub(states, target).map_err(ModelError::from)?;
        let sq = tape.mul(diff, diff).map_err(ModelError::from)?;
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s).map_err(ModelError::from)?,
        });
    }
    let total = total.ok_or_else(|| PpoError::Contract("no trajectories".into()))?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoLogRow {
    pub batch: usize,
    pub mode: RolloutMode,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
    pub lr: f64,
    /// `max |logp_new - logp_old|` at the update.
    pub max_ratio_gap: f64,
    /// `max |unclipped - clipped|` at the update.
    pub max_branch_gap: f64,
    pub mean_length: f64,
}

impl PpoLogRow {
    pub const CSV_HEADER: &'static str =
        "batch,mode,mean_reward,mean_advantage,policy_objective,value_loss,lr,max_ratio_gap,max_branch_gap,mean_length";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.batch,
            self.mode.name(),
            self.mean_reward,
            self.mean_advantage,
            self.policy_objective,
            self.value_loss,
            self.lr,
            self.max_ratio_gap,
            self.max_branch_gap,
            self.mean_length
        )
    }
}

fn dump(trajs: &[Trajectory]) -> String {
    let bad: Vec<&Trajectory> = trajs.iter().filter(|t| !t.all_finite()).collect();
    let shown = if bad.is_empty() { trajs.iter().collect() } else { bad };
    serde_json::to_string(&shown).unwrap_or_else(|e| format!("<unserializable: {e}>"))
}

fn max_gap(tape: &Tape, a: Var, b: &[f64]) -> f64 {
    tape.value(a).data().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One epoch of outer batches, each with a single policy step and a single value step.
pub fn train(
    policy: ModelParams,
    value: ModelParams,
    reward: &RewardFn,
    data: &ExampleSet,
    cfg: &PpoConfig,
    mut log: impl FnMut(&PpoLogRow),
) -> Result<(ModelParams, ModelParams), PpoError> {
    cfg.validate()?;
    policy.require_head(HeadKind::Logits)?;
    value.require_head(HeadKind::Scalar)?;
    if data.is_empty() {
        return Err(PpoError::Contract("no training examples".into()));
    }
    let (mut policy, mut value) = (policy, value);
    let mut p_opt = AdamW::new(&policy, cfg.adamw);
    let mut v_opt = AdamW::new(&value, cfg.adamw);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut b = 0;
    for epoch in 0..cfg.epochs {
        for (i, chunk) in data.examples.chunks(cfg.batch_size).enumerate() {
            let mode = RolloutMode::for_batch(b);
            let batch: Vec<&Example> = chunk.iter().collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|j| seeding::derive(cfg.seed, (epoch * data.len() + i * cfg.batch_size + j) as u64))
                .collect();
            let mut trajs = rollout(&policy, &value, reward, &batch, mode, &seeds, cfg)?;
            if !trajs.iter().all(Trajectory::all_finite) {
                return Err(PpoError::NonFinite { batch: b, dump: dump(&trajs) });
            }
            if cfg.normalize_advantages {
                normalize_advantages(&mut trajs);
            }

            let mut objective = 0.0;
            let mut ratio_gap = 0.0f64;
            let mut branch_gap = 0.0f64;
            let (p_loss, p_grads) = loss_and_grads(&policy, |tape, bound| {
                let terms = policy_objective_on_tape(tape, &policy, bound, &trajs, cfg.clip_eps).map_err(to_model)?;
                objective = tape.scalar_value(terms.objective);
                for ((lp, s1, s2), tr) in terms.pieces.iter().zip(&trajs) {
                    ratio_gap = ratio_gap.max(max_gap(tape, *lp, &tr.old_log_probs));
                    branch_gap = branch_gap.max(max_gap(tape, *s1, tape.value(*s2).data()));
                }
                Ok(tape.scale(terms.objective, -1.0))
            })?;
            let (v_loss, v_grads) = loss_and_grads(&value, |tape, bound| {
                value_loss_on_tape(tape, &value, bound, &trajs).map_err(to_model)
            })?;
            if !p_loss.is_finite() || !v_loss.is_finite() {
                return Err(PpoError::NonFinite { batch: b, dump: dump(&trajs) });
            }
            let lr = cosine_lr(cfg.lr, b, total);
            p_opt.step(&mut policy, &p_grads, lr);
            v_opt.step(&mut value, &v_grads, cosine_lr(cfg.value_lr, b, total));

            let tokens: usize = trajs.iter().map(Trajectory::len).sum();
            let sum = |f: fn(&Trajectory) -> f64| trajs.iter().map(f).sum::<f64>() / tokens as f64;
            log(&PpoLogRow {
                batch: b,
                mode,
                mean_reward: sum(|t| t.rewards.iter().sum()),
                mean_advantage: sum(|t| t.advantages.iter().sum()),
                policy_objective: objective,
                value_loss: v_loss,
                lr,
                max_ratio_gap: ratio_gap,
                max_branch_gap: branch_gap,
                mean_length: tokens as f64 / trajs.len() as f64,
            });
            b += 1;
        }
    }
    Ok((policy, value))
}

fn to_model(e: PpoError) -> ModelError {
    match e {
        PpoError::Model(m) => m,
        other => ModelError::Contract(other.to_string()),
    }
}
