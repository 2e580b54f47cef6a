//! Maximum-likelihood fine-tuning (teacher forcing) and text post-processing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::Example;
use crate::optim::{loss_and_grads, AdamW, AdamWConfig, LrSchedule};
use crate::seqmodel::{self, Bound, HeadKind, ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps when set; the schedule spans the shorter run.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 1,
            batch_size: 7,
            seed: 0,
            max_steps: None,
            schedule: LrSchedule::Cosine,
            adamw: AdamWConfig::default(),
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(ModelError::Config(format!("MLE config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Mean negative log-likelihood of the output tokens of `batch`, pooled over tokens.
pub fn nll_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    batch: &[&Example],
) -> Result<Var, ModelError> {
    let n: usize = batch.iter().map(|e| e.output_tokens.len()).sum();
    if n == 0 {
        return Err(ModelError::Contract("batch has no output tokens".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let mut seq = ex.input_tokens.clone();
        seq.extend_from_slice(&ex.output_tokens[..ex.output_tokens.len() - 1]);
        let logits = seqmodel::head_on_tape(tape, params, bound, &seq)?;
        let lp = seqmodel::log_prob_on_tape(tape, logits, ex.input_tokens.len(), &ex.output_tokens)?;
        let s = tape.sum(lp);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), -1.0 / n as f64))
}

/// Held-out mean token NLL.
pub fn mean_nll(params: &ModelParams, data: &[Example]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let refs: Vec<&Example> = data.iter().collect();
    let v = nll_on_tape(&mut tape, params, &bound, &refs)?;
    Ok(tape.scalar_value(v))
}

/// Teacher-forced cross-entropy training in data order.
pub fn train_mle(
    init: ModelParams,
    data: &[Example],
    cfg: &MleConfig,
    mut log: impl FnMut(&MleLogRow),
) -> Result<ModelParams, ModelError> {
    init.require_head(HeadKind::Logits)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Contract("no training examples".into()));
    }
    let mut params = init;
    let mut opt = AdamW::new(&params, cfg.adamw);
    let full = data.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let total = cfg.max_steps.map_or(full, |m| m.min(full));
    let mut step = 0;
    'outer: for _ in 0..cfg.epochs {
        for chunk in data.chunks(cfg.batch_size) {
            if step == total {
                break 'outer;
            }
            let batch: Vec<&Example> = chunk.iter().collect();
            let (loss, grads) = loss_and_grads(&params, |tape, bound| nll_on_tape(tape, &params, bound, &batch))?;
            if !loss.is_finite() {
                return Err(ModelError::Contract(format!("non-finite MLE loss at step {step}")));
            }
            let lr = cfg.schedule.at(cfg.lr, step, total);
            opt.step(&mut params, &grads, lr);
            log(&MleLogRow { step, loss, lr });
            step += 1;
        }
    }
    Ok(params)
}

/// Drops leading `Sure,` lines until the text no longer opens with one.
pub fn strip_sure_preamble(text: &str) -> String {
    let mut rest = text;
    while rest.starts_with("Sure,") {
        match rest.find('\n') {
            Some(i) => rest = &rest[i + 1..],
            None => break,
        }
    }
    rest.to_string()
}

/// Everything before the first newline.
pub fn truncate_after_newline(text: &str) -> String {
    text.split('\n').next().unwrap_or_default().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_extraction_task, TaskConfig, EOS};
    use crate::seqmodel::ModelConfig;

    #[test]
    fn post_processing_examples() {
        assert_eq!(strip_sure_preamble("Sure, here is a summary:\nAlice met Bob."), "Alice met Bob.");
        assert_eq!(strip_sure_preamble("Sure, but no newline"), "Sure, but no newline");
        assert_eq!(strip_sure_preamble("Alice met Bob."), "Alice met Bob.");
        assert_eq!(strip_sure_preamble("Sure,\nSure, ok\nbody"), "body");
        assert_eq!(truncate_after_newline("A summary.\nA summary.\nA summ"), "A summary.");
        assert_eq!(truncate_after_newline("no newline here"), "no newline here");
        assert_eq!(truncate_after_newline("\nleading newline"), "");
    }

    fn small_set(n: usize) -> crate::corpus::ExampleSet {
        let task =
            TaskConfig { input_len_min: 6, input_len_max: 8, marked_min: 2, marked_max: 3, ..Default::default() };
        gen_extraction_task(11, n, &task).unwrap()
    }

    fn model(vocab: usize) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: vocab,
            d_model: 24,
            layers: 1,
            heads: 2,
            d_ff: 48,
            max_seq: 32,
            head: HeadKind::Logits,
        };
        ModelParams::init(cfg, 4).unwrap()
    }

    #[test]
    fn repeated_example_loss_decreases_monotonically() {
        let set = small_set(1);
        let data = vec![set.examples[0].clone(); 8];
        let cfg = MleConfig { lr: 1e-3, batch_size: 1, ..Default::default() };
        let mut losses = Vec::new();
        train_mle(model(set.vocab.len()), &data, &cfg, |r| losses.push(r.loss)).unwrap();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn memorizes_five_examples() {
        let set = small_set(5);
        let data: Vec<Example> = (0..60).flat_map(|_| set.examples.clone()).collect();
        let cfg = MleConfig { lr: 3e-3, batch_size: 5, ..Default::default() };
        let p = train_mle(model(set.vocab.len()), &data, &cfg, |_| {}).unwrap();
        for ex in &set.examples {
            let out = seqmodel::greedy(&p, &ex.input_tokens, 16).unwrap();
            assert_eq!(out, ex.output_tokens);
            assert_eq!(*out.last().unwrap(), EOS);
        }
    }

    #[test]
    fn deterministic_and_budgeted() {
        let set = small_set(10);
        let cfg = MleConfig { max_steps: Some(1), ..Default::default() };
        let mut steps = 0;
        let a = train_mle(model(set.vocab.len()), &set.examples, &cfg, |_| steps += 1).unwrap();
        let b = train_mle(model(set.vocab.len()), &set.examples, &cfg, |_| {}).unwrap();
        assert_eq!(steps, 1);
        assert_eq!(a, b);
        let scalar = model(set.vocab.len()).with_head(HeadKind::Scalar, 0).unwrap();
        assert!(matches!(train_mle(scalar, &set.examples, &cfg, |_| {}), Err(ModelError::HeadKind { .. })));
    }
}
