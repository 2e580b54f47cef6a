//! WebAssembly bindings for three small pieces of the pipeline. Every export
//! takes plain strings or numbers and returns JSON text, so the functions are
//! equally usable from native tests.

use std::sync::Arc;

use lastmile_core::corpus::{build_vocab, Example, ExampleSet, Provenance};
use lastmile_core::metrics::{length_adjust, rouge_l, rouge_n, LengthPair, RougeTriple};
use lastmile_core::negatives::{synthesize, NegCategory};
use lastmile_core::ppo::{gae, value_targets};
use lastmile_core::reward::LENGTH_PENALTY;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct RougeRow {
    name: &'static str,
    raw: RougeTriple,
    adjusted: RougeTriple,
}

#[derive(Serialize)]
struct RougeOut {
    np: usize,
    ng: usize,
    rows: Vec<RougeRow>,
}

/// ROUGE-1/2/L for one prediction, before and after length adjustment.
#[wasm_bindgen]
pub fn la_rouge(prediction: &str, reference: &str) -> String {
    let lp = LengthPair::of(prediction, reference);
    let rows = [
        ("1", rouge_n(prediction, reference, 1)),
        ("2", rouge_n(prediction, reference, 2)),
        ("L", rouge_l(prediction, reference)),
    ]
    .into_iter()
    .map(|(name, raw)| RougeRow { name, raw, adjusted: length_adjust(raw, lp) })
    .collect();
    to_json(&RougeOut { np: lp.np, ng: lp.ng, rows })
}

#[derive(Serialize)]
struct Curves {
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    targets: Vec<f64>,
}

/// A rollout of `out_len` tokens, each scored `token_reward`, with the length
/// penalty from position `gt_len` on. Values are held at `value` for every
/// state except the terminal one, which is zero.
#[wasm_bindgen]
pub fn advantage_curves(
    out_len: usize,
    gt_len: usize,
    token_reward: f64,
    value: f64,
    gamma: f64,
    lambda: f64,
) -> String {
    let rewards: Vec<f64> =
        (0..out_len).map(|t| token_reward + if t >= gt_len { LENGTH_PENALTY } else { 0.0 }).collect();
    let mut values = vec![value; out_len + 1];
    values[out_len] = 0.0;
    let advantages = gae(&rewards, &values, gamma, lambda).expect("values sized to rewards + 1");
    let targets = value_targets(&rewards, gamma);
    to_json(&Curves { rewards, advantages, targets })
}

const COMPANIONS: [(&str, &str); 3] = [
    ("the cat * sat on the * mat", "sat mat"),
    ("we * walked to * town and * back", "walked town back"),
    ("a * quick fox * jumps", "quick jumps"),
];

#[derive(Serialize)]
struct Negative {
    category: &'static str,
    output: String,
}

/// One negative of every category for the given pair. A few fixed companion
/// examples share the set so re-pairing has donors.
#[wasm_bindgen]
pub fn negatives(input: &str, output: &str, seed: u64, output_cap: usize) -> String {
    let pairs: Vec<(&str, &str)> = std::iter::once((input, output)).chain(COMPANIONS).collect();
    let texts: Vec<&str> = pairs.iter().flat_map(|(i, o)| [*i, *o]).collect();
    let vocab = match build_vocab(&texts, 10_000) {
        Ok(v) => Arc::new(v),
        Err(e) => return error_json(&e.to_string()),
    };
    let examples = pairs.iter().enumerate().map(|(id, (i, o))| Example::new(id, i, o, &vocab)).collect();
    let set = ExampleSet { examples, provenance: Provenance::Loaded, seed: None, vocab };
    let mut out = Vec::new();
    for cat in NegCategory::ALL {
        match synthesize(cat, &set, seed, output_cap) {
            Ok(data) => out.push(Negative { category: cat.name(), output: data[0].example.output_text.clone() }),
            Err(e) => return error_json(&e.to_string()),
        }
    }
    to_json(&out)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}
