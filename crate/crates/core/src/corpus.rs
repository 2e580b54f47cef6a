//! Dataset ingestion, word-level vocabulary, and the synthetic extraction task.
//!
//! Text is tokenized on whitespace. Newlines are kept as a reserved token so
//! that line-oriented post-processing can be expressed on token sequences;
//! [`normalize`] defines the canonical text form that decoding reproduces.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NEWLINE: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>", "<nl>"];

/// Default input cap for externally loaded data.
pub const EXTERNAL_INPUT_CAP: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Collapses runs of spaces and tabs, keeps line structure.
pub fn normalize(text: &str) -> String {
    text.split('\n').map(|line| line.split_whitespace().collect::<Vec<_>>().join(" ")).collect::<Vec<_>>().join("\n")
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Token-string to id map with five fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Reserved entries followed by `tokens` in the given order. Duplicates and
    /// reserved spellings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len() as TokenId);
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], |s| s.as_str())
    }

    /// Ids of all non-reserved entries.
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        NUM_RESERVED as TokenId..self.tokens.len() as TokenId
    }

    /// Word tokens with `NEWLINE` between lines. No BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(NEWLINE);
            }
            out.extend(words(line).map(|w| self.id(w)));
        }
        out
    }

    /// Inverse of [`Vocab::encode`] on normalized text. PAD, BOS and EOS are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut at_line_start = true;
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                NEWLINE => {
                    out.push('\n');
                    at_line_start = true;
                }
                _ => {
                    if !at_line_start {
                        out.push(' ');
                    }
                    out.push_str(self.token(id));
                    at_line_start = false;
                }
            }
        }
        out
    }

    /// `token<TAB>id` lines sorted by id.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: &str| CorpusError::Malformed { line: lineno + 1, reason: reason.into() };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| malformed("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| malformed("id is not an integer"))?;
            if id != tokens.len() {
                return Err(malformed("ids must be dense and sorted"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CorpusError::Malformed { line: 1, reason: "reserved entries missing".into() });
        }
        Ok(Vocab::from_tokens(tokens.into_iter().skip(NUM_RESERVED)))
    }
}

/// Keeps the most frequent whitespace tokens, ties broken lexicographically,
/// up to `max_size` entries including the five reserved ones.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Vocab, CorpusError> {
    if max_size <= NUM_RESERVED {
        return Err(CorpusError::Config(format!(
            "vocab max_size {max_size} leaves no room past {NUM_RESERVED} reserved ids"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for w in words(t.as_ref()) {
            if !RESERVED.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Ok(Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub input_text: String,
    pub output_text: String,
    /// BOS, the encoded input, then a NEWLINE separating prompt from answer.
    pub input_tokens: Vec<TokenId>,
    /// Encoded output terminated by EOS.
    pub output_tokens: Vec<TokenId>,
}

impl Example {
    pub fn new(id: usize, input: &str, output: &str, vocab: &Vocab) -> Self {
        let input_text = normalize(input);
        let output_text = normalize(output);
        let mut input_tokens = vec![BOS];
        input_tokens.extend(vocab.encode(&input_text));
        input_tokens.push(NEWLINE);
        let mut output_tokens = vocab.encode(&output_text);
        output_tokens.push(EOS);
        Self { id, input_text, output_text, input_tokens, output_tokens }
    }

    /// The encoded input without BOS and the trailing separator.
    pub fn input_body(&self) -> &[TokenId] {
        &self.input_tokens[1..self.input_tokens.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Loaded,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub vocab: Arc<Vocab>,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// `{"input": .., "output": ..}` per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ex in &self.examples {
            let line = serde_json::json!({ "input": ex.input_text, "output": ex.output_text });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub vocab_budget: usize,
    pub input_cap: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { vocab_budget: 8192, input_cap: EXTERNAL_INPUT_CAP }
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub set: ExampleSet,
    /// Records removed for exceeding the input cap.
    pub dropped: usize,
}

#[derive(Deserialize)]
struct Record {
    input: String,
    output: String,
}

fn read_records<R: BufRead>(r: R) -> Result<Vec<Record>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

/// Loads a JSONL file and builds its vocabulary from the kept records.
pub fn load_examples(path: &Path, opts: LoadOptions) -> Result<Loaded, CorpusError> {
    let file = std::fs::File::open(path)?;
    load_examples_from(BufReader::new(file), opts, None)
}

/// Like [`load_examples`], but encodes with an existing vocabulary when one is given.
pub fn load_examples_from<R: BufRead>(
    r: R,
    opts: LoadOptions,
    vocab: Option<Arc<Vocab>>,
) -> Result<Loaded, CorpusError> {
    let records = read_records(r)?;
    let total = records.len();
    // BOS and the separator count toward the cap.
    let kept: Vec<Record> = records
        .into_iter()
        .filter(|rec| {
            let n = normalize(&rec.input);
            2 + n.split('\n').map(|l| words(l).count()).sum::<usize>() + n.matches('\n').count() <= opts.input_cap
        })
        .collect();
    let dropped = total - kept.len();
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let texts: Vec<&str> = kept.iter().flat_map(|r| [r.input.as_str(), r.output.as_str()]).collect();
            Arc::new(build_vocab(&texts, opts.vocab_budget)?)
        }
    };
    let examples = kept.iter().enumerate().map(|(i, r)| Example::new(i, &r.input, &r.output, &vocab)).collect();
    Ok(Loaded { set: ExampleSet { examples, provenance: Provenance::Loaded, seed: None, vocab }, dropped })
}

/// Synthetic extraction task: the input is a random symbol string where a
/// marker precedes each "important" symbol; the output is the marked symbols
/// in input order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub alphabet: usize,
    pub input_len_min: usize,
    pub input_len_max: usize,
    pub marked_min: usize,
    pub marked_max: usize,
    pub input_cap: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { alphabet: 50, input_len_min: 20, input_len_max: 40, marked_min: 3, marked_max: 8, input_cap: 64 }
    }
}

pub const MARKER: &str = "*";

/// Opening line of a chatty answer.
pub const PREAMBLE: &str = "Sure, here are the marked symbols:";

impl TaskConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: String| Err(CorpusError::Config(m));
        if self.alphabet == 0 {
            return err("alphabet must be non-empty".into());
        }
        if self.input_len_min == 0 || self.input_len_min > self.input_len_max {
            return err(format!("bad input length range {}..={}", self.input_len_min, self.input_len_max));
        }
        if self.marked_min == 0 || self.marked_min > self.marked_max {
            return err(format!("bad marked range {}..={}", self.marked_min, self.marked_max));
        }
        if self.marked_max > self.input_len_min {
            return err(format!(
                "marked count up to {} exceeds the shortest input length {}",
                self.marked_max, self.input_len_min
            ));
        }
        if 2 + self.input_len_max + self.marked_max > self.input_cap {
            return err(format!(
                "longest input ({} tokens) exceeds input cap {}",
                2 + self.input_len_max + self.marked_max,
                self.input_cap
            ));
        }
        Ok(())
    }

    pub fn symbol(i: usize) -> String {
        format!("s{i}")
    }

    /// Fixed vocabulary: reserved ids, the marker, `s0..s{alphabet-1}`, then the preamble words.
    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens(
            std::iter::once(MARKER.to_string())
                .chain((0..self.alphabet).map(Self::symbol))
                .chain(words(PREAMBLE).map(str::to_string)),
        )
    }
}

pub fn gen_extraction_task(seed: u64, n: usize, cfg: &TaskConfig) -> Result<ExampleSet, CorpusError> {
    cfg.validate()?;
    let vocab = Arc::new(cfg.vocab());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for id in 0..n {
        let len = rng.random_range(cfg.input_len_min..=cfg.input_len_max);
        let k = rng.random_range(cfg.marked_min..=cfg.marked_max);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.alphabet)).collect();
        let mut marked = rand::seq::index::sample(&mut rng, len, k).into_vec();
        marked.sort_unstable();

        let mut input = Vec::with_capacity(len + k);
        let mut output = Vec::with_capacity(k);
        let mut next = marked.iter().peekable();
        for (pos, &s) in symbols.iter().enumerate() {
            if next.peek() == Some(&&pos) {
                next.next();
                input.push(MARKER.to_string());
                output.push(TaskConfig::symbol(s));
            }
            input.push(TaskConfig::symbol(s));
        }
        examples.push(Example::new(id, &input.join(" "), &output.join(" "), &vocab));
    }
    Ok(ExampleSet { examples, provenance: Provenance::Synthetic, seed: Some(seed), vocab })
}

/// How answers in a pretraining corpus are dressed up. Some open with
/// [`PREAMBLE`] on its own line; some keep going after the answer with
/// newline-separated repeats and a cut-off partial copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChattyStyle {
    pub preamble_prob: f64,
    pub ramble_prob: f64,
    pub max_repeats: usize,
}

impl Default for ChattyStyle {
    fn default() -> Self {
        Self { preamble_prob: 0.3, ramble_prob: 0.5, max_repeats: 3 }
    }
}

impl ChattyStyle {
    /// Leaves answers untouched.
    pub fn plain() -> Self {
        Self { preamble_prob: 0.0, ramble_prob: 0.0, max_repeats: 0 }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.preamble_prob) || !ok(self.ramble_prob) || (self.ramble_prob > 0.0 && self.max_repeats == 0) {
            return Err(CorpusError::Config(format!("bad chatty style {self:?}")));
        }
        Ok(())
    }

    fn render(&self, answer: &str, rng: &mut ChaCha8Rng) -> String {
        let mut out = answer.to_string();
        if rng.random_bool(self.ramble_prob) {
            for _ in 0..rng.random_range(1..=self.max_repeats) {
                out.push('\n');
                out.push_str(answer);
            }
            let ws: Vec<&str> = words(answer).collect();
            let cut = rng.random_range(0..ws.len().max(1));
            if cut > 0 {
                out.push('\n');
                out.push_str(&ws[..cut].join(" "));
            }
        }
        if rng.random_bool(self.preamble_prob) {
            out = format!("{PREAMBLE}\n{out}");
        }
        out
    }
}

/// Re-renders every answer of `set` in `style`; inputs and ids are kept.
pub fn chatty(set: &ExampleSet, style: &ChattyStyle, seed: u64) -> Result<ExampleSet, CorpusError> {
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = set
        .iter()
        .map(|ex| Example::new(ex.id, &ex.input_text, &style.render(&ex.output_text, &mut rng), &set.vocab))
        .collect();
    Ok(ExampleSet { examples, provenance: set.provenance, seed: set.seed, vocab: set.vocab.clone() })
}

/// Deterministic train/test partition. Ids are preserved and each side keeps
/// the original relative order.
pub fn split(set: &ExampleSet, test_fraction: f64, seed: u64) -> Result<(ExampleSet, ExampleSet), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::Config(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let n = set.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (ex, t) in set.examples.iter().zip(is_test) {
        if t {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    let part = |examples| ExampleSet { examples, provenance: set.provenance, seed: set.seed, vocab: set.vocab.clone() };
    Ok((part(train), part(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_keeps_all_when_budget_allows() {
        let v = build_vocab(&["a b a"], 10).unwrap();
        assert_eq!(v.len(), 7);
        assert!(v.contains("a") && v.contains("b"));
        // "a" is more frequent and comes first
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
    }

    #[test]
    fn vocab_budget_keeps_most_frequent() {
        let v = build_vocab(&["x y", "y z"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.contains("y"));
        assert!(!v.contains("x") && !v.contains("z"));
        assert_eq!(v.id("x"), UNK);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = build_vocab(&["c b a"], 7).unwrap();
        assert!(v.contains("a") && v.contains("b") && !v.contains("c"));
    }

    #[test]
    fn empty_corpus_gives_reserved_only() {
        let v = build_vocab::<&str>(&[], 8).unwrap();
        assert_eq!(v.len(), NUM_RESERVED);
        assert!(build_vocab::<&str>(&[], 5).is_err());
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocab::from_tokens(["x"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<nl>"), NEWLINE);
    }

    #[test]
    fn encode_decode_round_trip_with_newlines() {
        let v = Vocab::from_tokens(["Sure,", "here", "it", "is", "A", "B"]);
        for text in ["Sure, here  it is\nA B", "\nA", "A\n\nB", "", "A \t B"] {
            assert_eq!(v.decode(&v.encode(text)), normalize(text), "{text:?}");
        }
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = build_vocab(&["q w e r q"], 20).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("<pad>\t0\n<unk>\t1\n"));
        assert_eq!(Vocab::read_tsv(&buf[..]).unwrap(), v);
    }

    #[test]
    fn smallest_record_loads() {
        let data = r#"{"input":"a b","output":"a"}"#;
        let loaded = load_examples_from(data.as_bytes(), LoadOptions::default(), None).unwrap();
        let ex = &loaded.set.examples[0];
        assert_eq!(ex.input_tokens, vec![BOS, ex.input_tokens[1], ex.input_tokens[2], NEWLINE]);
        assert_eq!(ex.input_body().len(), 2);
        assert_eq!(ex.input_tokens[0], BOS);
        assert_eq!(ex.output_tokens.last(), Some(&EOS));
        assert_eq!(ex.output_tokens.len(), 2);
    }

    #[test]
    fn three_lines_give_dense_ids() {
        let data = "{\"input\":\"a\",\"output\":\"b\"}\n{\"input\":\"c\",\"output\":\"d\"}\n{\"input\":\"e\",\"output\":\"f\"}\n";
        let loaded = load_examples_from(data.as_bytes(), LoadOptions::default(), None).unwrap();
        let ids: Vec<usize> = loaded.set.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(loaded.dropped, 0);
    }

    #[test]
    fn overlong_input_is_dropped() {
        let input: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let line = serde_json::json!({"input": input.join(" "), "output": "w1"}).to_string();
        let opts = LoadOptions { vocab_budget: 100, input_cap: 400 };
        let loaded = load_examples_from(line.as_bytes(), opts, None).unwrap();
        assert_eq!(loaded.set.len(), 0);
        assert_eq!(loaded.dropped, 1);
    }

    #[test]
    fn malformed_record_reports_line() {
        let data = "{\"input\":\"a\",\"output\":\"b\"}\n{\"input\":\"c\"}\n";
        match load_examples_from(data.as_bytes(), LoadOptions::default(), None) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_examples_from(&b""[..], LoadOptions::default(), None), Err(CorpusError::Empty)));
    }

    #[test]
    fn extraction_output_follows_markers() {
        let vocab = TaskConfig::default().vocab();
        let set = gen_extraction_task(3, 50, &TaskConfig::default()).unwrap();
        let marker = vocab.id(MARKER);
        for ex in set.iter() {
            let expect: Vec<TokenId> =
                ex.input_tokens.windows(2).filter(|w| w[0] == marker).map(|w| w[1]).chain([EOS]).collect();
            assert_eq!(ex.output_tokens, expect);
        }
        let ex = Example::new(0, "s1 * s7 s2 * s3 s4", "s7 s3", &vocab);
        assert_eq!(ex.output_tokens, vec![vocab.id("s7"), vocab.id("s3"), EOS]);
    }

    #[test]
    fn chatty_answers_clean_up_to_the_original() {
        let set = gen_extraction_task(5, 200, &TaskConfig::default()).unwrap();
        let style = ChattyStyle { preamble_prob: 0.5, ramble_prob: 0.5, max_repeats: 2 };
        let chat = chatty(&set, &style, 1).unwrap();
        assert_eq!(chat.examples, chatty(&set, &style, 1).unwrap().examples);
        let (mut pre, mut ramble) = (0, 0);
        for (a, b) in set.iter().zip(chat.iter()) {
            assert_eq!(a.input_tokens, b.input_tokens);
            assert!(!b.output_tokens.contains(&UNK));
            let body =
                b.output_text.strip_prefix(&format!("{PREAMBLE}\n")).inspect(|_| pre += 1).unwrap_or(&b.output_text);
            assert_eq!(body.split('\n').next(), Some(a.output_text.as_str()));
            ramble += usize::from(body.contains('\n'));
        }
        assert!(pre > 50 && pre < 150 && ramble > 50 && ramble < 150, "{pre} {ramble}");
        assert_eq!(chatty(&set, &ChattyStyle::plain(), 1).unwrap().examples, set.examples);
        assert!(chatty(&set, &ChattyStyle { ramble_prob: 1.5, ..style }, 1).is_err());
    }

    #[test]
    fn extraction_task_is_deterministic_and_in_range() {
        let cfg = TaskConfig::default();
        let a = gen_extraction_task(1, 100, &cfg).unwrap();
        let b = gen_extraction_task(1, 100, &cfg).unwrap();
        assert_eq!(a.examples, b.examples);
        for ex in a.iter() {
            let k = ex.output_tokens.len() - 1;
            assert!((3..=8).contains(&k));
            assert!(ex.input_tokens.len() <= cfg.input_cap);
            assert_eq!(a.vocab.decode(&a.vocab.encode(&ex.input_text)), ex.input_text);
        }
    }

    #[test]
    fn extraction_config_rejects_impossible_marking() {
        let cfg = TaskConfig { input_len_min: 4, input_len_max: 6, marked_min: 3, marked_max: 5, ..Default::default() };
        assert!(matches!(gen_extraction_task(0, 1, &cfg), Err(CorpusError::Config(_))));
    }

    #[test]
    fn split_sizes_and_partition() {
        let set = gen_extraction_task(0, 10, &TaskConfig::default()).unwrap();
        let (train, test) = split(&set, 0.2, 9).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train2, test2) = split(&set, 0.2, 9).unwrap();
        assert_eq!(train.examples, train2.examples);
        assert_eq!(test.examples, test2.examples);
        let mut ids: Vec<usize> = train.iter().chain(test.iter()).map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        assert!(split(&set, 1.0, 0).is_err());
        assert!(split(&set, 0.0, 0).is_err());
    }
}
