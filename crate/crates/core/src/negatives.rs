//! Synthetic negative outputs and the weighted reward-model training set.
//!
//! Each category is generated from the positive set with the same size as the
//! positive set. Negative tokens carry target 0 and weight 1/5; positive
//! tokens carry target 1 and weight 1.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, ExampleSet, TokenId, Vocab, EOS};
use crate::seeding;

pub const NEGATIVE_WEIGHT: f64 = 1.0 / 5.0;
pub const POSITIVE_TARGET: f64 = 1.0;
pub const NEGATIVE_TARGET: f64 = 0.0;

/// Prefix fraction range and repeated-block size range for [`NegCategory::RepetitiveTail`].
pub const TAIL_PREFIX_FRACTION: (f64, f64) = (0.3, 0.7);
pub const TAIL_MAX_BLOCK: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum NegativesError {
    #[error("{category:?} cannot be generated: {reason}")]
    Infeasible { category: NegCategory, reason: String },
    #[error("source set is empty")]
    EmptySource,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegCategory {
    RandomTokens = 1,
    RePaired = 2,
    Shuffled = 3,
    RepetitiveTail = 4,
    InputEcho = 5,
}

impl NegCategory {
    pub const ALL: [NegCategory; 5] =
        [Self::RandomTokens, Self::RePaired, Self::Shuffled, Self::RepetitiveTail, Self::InputEcho];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RandomTokens => "random_tokens",
            Self::RePaired => "re_paired",
            Self::Shuffled => "shuffled",
            Self::RepetitiveTail => "repetitive_tail",
            Self::InputEcho => "input_echo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative(NegCategory),
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative(c) => c.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "positive" {
            return Some(Label::Positive);
        }
        NegCategory::ALL.into_iter().find(|c| c.name() == s).map(Label::Negative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardDatum {
    pub example: Example,
    pub label: Label,
    pub weight: f64,
    /// One target per output token.
    pub token_targets: Vec<f64>,
}

impl RewardDatum {
    pub fn positive(example: Example) -> Self {
        let token_targets = vec![POSITIVE_TARGET; example.output_tokens.len()];
        Self { example, label: Label::Positive, weight: 1.0, token_targets }
    }

    fn negative(source: &Example, category: NegCategory, output_tokens: Vec<TokenId>, vocab: &Vocab) -> Self {
        let example = Example {
            id: source.id,
            input_text: source.input_text.clone(),
            output_text: vocab.decode(&output_tokens),
            input_tokens: source.input_tokens.clone(),
            output_tokens,
        };
        let token_targets = vec![NEGATIVE_TARGET; example.output_tokens.len()];
        Self { example, label: Label::Negative(category), weight: NEGATIVE_WEIGHT, token_targets }
    }
}

fn content(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

/// Content truncated to `cap`, terminated by EOS when there is room.
fn terminate(mut tokens: Vec<TokenId>, cap: usize) -> Vec<TokenId> {
    tokens.truncate(cap);
    if tokens.len() < cap {
        tokens.push(EOS);
    }
    tokens
}

/// Permutation with no index `i` whose donor output equals output `i`.
fn derangement<R: Rng>(outputs: &[&[TokenId]], rng: &mut R) -> Option<Vec<usize>> {
    let n = outputs.len();
    let mut perm: Vec<usize> = (0..n).collect();
    // The acceptance rate of a uniform shuffle tends to 1/e, so this succeeds
    // quickly unless outputs are heavily duplicated.
    for _ in 0..10_000 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &j)| outputs[i] != outputs[j]) {
            return Some(perm);
        }
    }
    None
}

/// Builds `|source|` negatives of one category. Outputs stay within
/// `output_cap` tokens, except that a repetitive tail always carries one full
/// repeat of its block, so caps below 10 can be overrun.
pub fn synthesize(
    category: NegCategory,
    source: &ExampleSet,
    seed: u64,
    output_cap: usize,
) -> Result<Vec<RewardDatum>, NegativesError> {
    if source.is_empty() {
        return Err(NegativesError::EmptySource);
    }
    if output_cap == 0 {
        return Err(NegativesError::Infeasible { category, reason: "output cap is zero".into() });
    }
    let vocab = &source.vocab;
    let mut rng = seeding::rng_for(seed, category.code() as u64);
    let infeasible = |reason: &str| NegativesError::Infeasible { category, reason: reason.into() };

    let out = match category {
        NegCategory::RandomTokens => {
            let ids = vocab.content_ids();
            if ids.is_empty() {
                return Err(infeasible("vocabulary has no content tokens"));
            }
            source
                .iter()
                .map(|ex| {
                    let len = content(&ex.output_tokens).len();
                    let toks = (0..len).map(|_| rng.random_range(ids.clone())).collect();
                    RewardDatum::negative(ex, category, terminate(toks, output_cap), vocab)
                })
                .collect()
        }
        NegCategory::RePaired => {
            if source.len() < 2 {
                return Err(infeasible("re-pairing needs at least two examples"));
            }
            let outputs: Vec<&[TokenId]> = source.iter().map(|e| content(&e.output_tokens)).collect();
            let perm =
                derangement(&outputs, &mut rng).ok_or_else(|| infeasible("outputs too duplicated to derange"))?;
            source
                .iter()
                .zip(&perm)
                .map(|(ex, &j)| RewardDatum::negative(ex, category, terminate(outputs[j].to_vec(), output_cap), vocab))
                .collect()
        }
        NegCategory::Shuffled => source
            .iter()
            .map(|ex| {
                let orig = content(&ex.output_tokens);
                let mut toks = orig.to_vec();
                let shufflable = toks.windows(2).any(|w| w[0] != w[1]);
                if shufflable {
                    while toks == orig {
                        toks.shuffle(&mut rng);
                    }
                }
                RewardDatum::negative(ex, category, terminate(toks, output_cap), vocab)
            })
            .collect(),
        NegCategory::RepetitiveTail => source
            .iter()
            .map(|ex| {
                let orig = content(&ex.output_tokens);
                let frac = rng.random_range(TAIL_PREFIX_FRACTION.0..=TAIL_PREFIX_FRACTION.1);
                let block = rng.random_range(1..=TAIL_MAX_BLOCK);
                let mut toks: Vec<TokenId> = if orig.is_empty() {
                    vec![vocab.content_ids().start]
                } else {
                    let len = ((orig.len() as f64) * frac).round().clamp(1.0, orig.len() as f64) as usize;
                    orig[..len].to_vec()
                };
                let block = block.min(toks.len());
                // at least one repetition, even when the cap is tighter
                toks.truncate(output_cap.saturating_sub(block).max(block));
                let unit = toks[toks.len() - block..].to_vec();
                let target = output_cap.max(toks.len() + block);
                for i in 0.. {
                    if toks.len() >= target {
                        break;
                    }
                    toks.push(unit[i % block]);
                }
                RewardDatum::negative(ex, category, toks, vocab)
            })
            .collect(),
        NegCategory::InputEcho => source
            .iter()
            .map(|ex| {
                let input: Vec<TokenId> = ex.input_body().to_vec();
                RewardDatum::negative(ex, category, terminate(input, output_cap), vocab)
            })
            .collect(),
    };
    Ok(out)
}

/// Positives plus all five negative categories, deterministically shuffled.
pub fn build_reward_dataset(
    positives: &ExampleSet,
    seed: u64,
    output_cap: usize,
) -> Result<Vec<RewardDatum>, NegativesError> {
    if positives.is_empty() {
        return Err(NegativesError::EmptySource);
    }
    let mut data: Vec<RewardDatum> = positives.iter().cloned().map(RewardDatum::positive).collect();
    for cat in NegCategory::ALL {
        data.extend(synthesize(cat, positives, seed, output_cap)?);
    }
    data.shuffle(&mut seeding::rng_for(seed, 0));
    Ok(data)
}

/// Index of the start of a trailing periodic run with period at most
/// `max_period` covering at least two full periods, if one exists.
pub fn detect_repeated_tail(tokens: &[TokenId], max_period: usize) -> Option<(usize, usize)> {
    (1..=max_period).find_map(|p| {
        if tokens.len() < 2 * p {
            return None;
        }
        let mut start = tokens.len() - p;
        while start > 0 && tokens[start - 1] == tokens[start - 1 + p] {
            start -= 1;
        }
        (tokens.len() - start >= 2 * p).then_some((p, start))
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    input: String,
    output: String,
    label: String,
    weight: f64,
    /// Whether the output ends with an end-of-sequence token.
    eos: bool,
}

pub fn write_jsonl<W: Write>(data: &[RewardDatum], mut w: W) -> std::io::Result<()> {
    for d in data {
        let rec = Record {
            input: d.example.input_text.clone(),
            output: d.example.output_text.clone(),
            label: d.label.name().to_string(),
            weight: d.weight,
            eos: d.example.output_tokens.last() == Some(&EOS),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R, vocab: &Arc<Vocab>) -> Result<Vec<RewardDatum>, NegativesError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| NegativesError::Malformed { line: i + 1, reason };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let label = Label::parse(&rec.label).ok_or_else(|| malformed(format!("unknown label {}", rec.label)))?;
        let mut example = Example::new(out.len(), &rec.input, &rec.output, vocab);
        if !rec.eos {
            example.output_tokens.pop();
        }
        let target = if label == Label::Positive { POSITIVE_TARGET } else { NEGATIVE_TARGET };
        let token_targets = vec![target; example.output_tokens.len()];
        out.push(RewardDatum { example, label, weight: rec.weight, token_targets });
    }
    Ok(out)
}
