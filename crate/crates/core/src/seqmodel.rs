//! Small causal transformer with interchangeable heads.
//!
//! The same backbone serves the policy (token logits) and the reward and
//! value networks (one scalar per position). Training builds the forward pass
//! on a [`Tape`]; decoding uses [`Decoder`], an incremental path with cached
//! keys and values that performs the same floating-point operations in the
//! same order, so its logits match [`forward_logits`] bit for bit.

use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, kernels, AutodiffError, Gradients, Tape, Tensor, Var};
use crate::corpus::{TokenId, EOS};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the model maximum {max}")]
    Length { len: usize, max: usize },
    #[error("expected a {expected:?} head, model has {actual:?}")]
    HeadKind { expected: HeadKind, actual: HeadKind },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Logits,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, head: HeadKind) -> Self {
        Self { vocab_size, d_model: 64, layers: 2, heads: 2, d_ff: 256, max_seq: 256, head }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return err(format!("all sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_seq == 0 {
            return err("max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Logits => self.vocab_size,
            HeadKind::Scalar => 1,
        }
    }
}

const PER_LAYER: usize = 16;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

// Offsets within a layer's block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

fn layer_idx(layer: usize, offset: usize) -> usize {
    2 + layer * PER_LAYER + offset
}

/// `a * sin(pos * f_i)` and `a * cos(pos * f_i)` interleaved, with geometric frequencies.
fn sinusoid_table(rows: usize, d: usize, a: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for j in 0..d {
            let freq = 10_000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out.push(a * if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Named parameter tensors in a fixed order, plus the config they satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let mut out =
            vec![("tok_emb".to_string(), vec![cfg.vocab_size, d]), ("pos_emb".to_string(), vec![cfg.max_seq, d])];
        for l in 0..cfg.layers {
            let shapes: [Vec<usize>; PER_LAYER] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, ff],
                vec![ff],
                vec![ff, d],
                vec![d],
            ];
            for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.g".into(), vec![d]));
        out.push(("ln_f.b".into(), vec![d]));
        out.push(("head.w".into(), vec![d, cfg.out_dim()]));
        out.push(("head.b".into(), vec![cfg.out_dim()]));
        out
    }

    /// Scaled-normal weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in Self::layout(&cfg) {
            let n: usize = shape.iter().product();
            enum Fill {
                Ones,
                Zeros,
                Normal(f64),
                Sinusoid(f64),
            }
            let fill = if name.ends_with(".g") {
                Fill::Ones
            } else if name == "pos_emb" {
                Fill::Sinusoid(0.1 * std::f64::consts::SQRT_2)
            } else if name.contains("emb") {
                Fill::Normal(0.1)
            } else if shape.len() == 2 {
                let s = 1.0 / (shape[0] as f64).sqrt();
                Fill::Normal(if name.ends_with("wo") || name.ends_with("w2") {
                    s * residual_scale
                } else if name == "head.w" {
                    0.02
                } else {
                    s
                })
            } else {
                Fill::Zeros
            };
            let data = match fill {
                Fill::Ones => vec![1.0; n],
                Fill::Zeros => vec![0.0; n],
                Fill::Normal(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Fill::Sinusoid(a) => sinusoid_table(shape[0], shape[1], a),
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { cfg, names, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    fn t(&self, i: usize) -> &[f64] {
        self.tensors[i].data()
    }

    fn head_w(&self) -> usize {
        self.tensors.len() - 2
    }

    /// Copies the backbone and attaches a freshly initialized head of `head` kind.
    pub fn with_head(&self, head: HeadKind, seed: u64) -> Result<Self, ModelError> {
        let cfg = ModelConfig { head, ..self.cfg };
        let mut fresh = Self::init(cfg, seed)?;
        let backbone = self.tensors.len() - 2;
        fresh.tensors[..backbone].clone_from_slice(&self.tensors[..backbone]);
        Ok(fresh)
    }

    pub fn require_head(&self, expected: HeadKind) -> Result<(), ModelError> {
        if self.cfg.head == expected {
            Ok(())
        } else {
            Err(ModelError::HeadKind { expected, actual: self.cfg.head })
        }
    }

    /// Records every tensor as a leaf; `trainable` decides whether gradients flow.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradients for every tensor in layout order; zeros where the loss did not reach.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().zip(&self.tensors).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Writes the tensor container to `path` and the config as `key = value`
    /// text to `path` + `.cfg`.
    pub fn save(&self, path: &Path, role: &str) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        checkpoint::write_tensors(BufWriter::new(file), &self.named_tensors())?;
        let meta = CheckpointMeta { role: role.to_string(), model: self.cfg };
        let text =
            toml::to_string(&meta).map_err(|e| ModelError::Checkpoint { path: path.into(), reason: e.to_string() })?;
        std::fs::write(sidecar(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let ck_err = |reason: String| ModelError::Checkpoint { path: path.into(), reason };
        let text = std::fs::read_to_string(sidecar(path)).map_err(|e| ck_err(format!("config sidecar: {e}")))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| ck_err(e.to_string()))?;
        meta.model.validate()?;
        let file = std::fs::File::open(path)?;
        let named = checkpoint::read_tensors(BufReader::new(file))?;
        let layout = Self::layout(&meta.model);
        if named.len() != layout.len() {
            return Err(ck_err(format!("expected {} tensors, found {}", layout.len(), named.len())));
        }
        for ((name, t), (lname, lshape)) in named.iter().zip(&layout) {
            if name != lname || t.shape() != lshape.as_slice() {
                return Err(ck_err(format!("tensor {name} {:?} does not match layout {lname} {lshape:?}", t.shape())));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok((Self { cfg: meta.model, names, tensors }, meta.role))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    role: String,
    model: ModelConfig,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in [`ModelParams::tensors`] order, e.g. those supplied by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

fn check_len(cfg: &ModelConfig, len: usize) -> Result<(), ModelError> {
    if len == 0 {
        return Err(ModelError::Contract("empty token sequence".into()));
    }
    if len > cfg.max_seq {
        return Err(ModelError::Length { len, max: cfg.max_seq });
    }
    Ok(())
}

fn ids(tokens: &[TokenId]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

/// `layer_norm(x) * g + b`
fn affine_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var, AutodiffError> {
    let n = tape.layer_norm(x)?;
    let s = tape.mul_row(n, g)?;
    tape.add_row(s, b)
}

/// Final-norm hidden states `[len, d_model]`.
pub fn hidden_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    tokens: &[TokenId],
) -> Result<Var, ModelError> {
    let cfg = &params.cfg;
    check_len(cfg, tokens.len())?;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::Contract(format!("token id {bad} outside vocab of {}", cfg.vocab_size)));
    }
    let n = tokens.len();
    let p = |i: usize| bound.vars[i];
    let tok = tape.embedding(p(TOK_EMB), &ids(tokens))?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.embedding(p(POS_EMB), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let causal: Vec<bool> = (0..n * n).map(|k| k % n > k / n).collect();
    for l in 0..cfg.layers {
        let w = |o: usize| p(layer_idx(l, o));
        let h = affine_norm(tape, x, w(LN1_G), w(LN1_B))?;
        let q = tape.matmul(h, w(WQ))?;
        let q = tape.add_row(q, w(BQ))?;
        let k = tape.matmul(h, w(WK))?;
        let k = tape.add_row(k, w(BK))?;
        let v = tape.matmul(h, w(WV))?;
        let v = tape.add_row(v, w(BV))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.masked_fill(scores, causal.clone(), f64::NEG_INFINITY)?;
            let att = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(cat, w(WO))?;
        let o = tape.add_row(o, w(BO))?;
        x = tape.add(x, o)?;

        let h2 = affine_norm(tape, x, w(LN2_G), w(LN2_B))?;
        let f = tape.matmul(h2, w(W1))?;
        let f = tape.add_row(f, w(B1))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w(W2))?;
        let f = tape.add_row(f, w(B2))?;
        x = tape.add(x, f)?;
    }
    let lnf = params.tensors.len() - 4;
    Ok(affine_norm(tape, x, p(lnf), p(lnf + 1))?)
}

/// Head output `[len, out_dim]` on the tape.
pub fn head_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    tokens: &[TokenId],
) -> Result<Var, ModelError> {
    let h = hidden_on_tape(tape, params, bound, tokens)?;
    let hw = params.head_w();
    let out = tape.matmul(h, bound.vars[hw])?;
    Ok(tape.add_row(out, bound.vars[hw + 1])?)
}

/// Per-position next-token logits `[len, vocab]`.
pub fn forward_logits(params: &ModelParams, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
    params.require_head(HeadKind::Logits)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = head_on_tape(&mut tape, params, &bound, tokens)?;
    Ok(tape.value(out).clone())
}

/// Independent forwards over several sequences.
pub fn forward_logits_batch(params: &ModelParams, batch: &[&[TokenId]]) -> Result<Vec<Tensor>, ModelError> {
    params.require_head(HeadKind::Logits)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    batch
        .iter()
        .map(|toks| {
            let out = head_on_tape(&mut tape, params, &bound, toks)?;
            Ok(tape.value(out).clone())
        })
        .collect()
}

/// One scalar per position.
pub fn forward_scalar(params: &ModelParams, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    params.require_head(HeadKind::Scalar)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = head_on_tape(&mut tape, params, &bound, tokens)?;
    Ok(tape.value(out).data().to_vec())
}

/// `log softmax(row_t)[action_t]` for aligned rows and actions.
pub fn log_prob(rows: &Tensor, actions: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    if rows.shape().len() != 2 || rows.rows() != actions.len() {
        return Err(ModelError::Contract(format!(
            "{} actions against logit rows of shape {:?}",
            actions.len(),
            rows.shape()
        )));
    }
    let mut out = Vec::with_capacity(actions.len());
    for (r, &a) in actions.iter().enumerate() {
        let mut row = rows.row(r).to_vec();
        if a as usize >= row.len() {
            return Err(ModelError::Contract(format!("action {a} outside {} logits", row.len())));
        }
        kernels::log_softmax_in_place(&mut row);
        out.push(row[a as usize]);
    }
    Ok(out)
}

/// Tape version of [`log_prob`] over the action span of a full-sequence forward.
///
/// `logits` covers `prompt_len + actions.len()` positions (the final one may be
/// absent); action `t` is scored by the row at position `prompt_len - 1 + t`.
pub fn log_prob_on_tape(
    tape: &mut Tape,
    logits: Var,
    prompt_len: usize,
    actions: &[TokenId],
) -> Result<Var, ModelError> {
    if prompt_len == 0 {
        return Err(ModelError::Contract("prompt must contain at least BOS".into()));
    }
    let rows = tape.slice_rows(logits, prompt_len - 1, actions.len())?;
    let lsm = tape.log_softmax_rows(rows)?;
    Ok(tape.gather(lsm, ids(actions))?)
}

/// Rows of a logits tensor that score `len` actions following a prompt of `prompt_len` tokens.
pub fn action_rows(logits: &Tensor, prompt_len: usize, len: usize) -> Result<Tensor, ModelError> {
    let cols = logits.cols();
    if prompt_len == 0 || prompt_len - 1 + len > logits.rows() {
        return Err(ModelError::Contract(format!(
            "cannot take {len} action rows after prompt {prompt_len} from {:?}",
            logits.shape()
        )));
    }
    let start = (prompt_len - 1) * cols;
    Ok(Tensor::matrix(len, cols, logits.data()[start..start + len * cols].to_vec())?)
}

/// Incremental decoder with per-layer key/value caches.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self, ModelError> {
        params.require_head(HeadKind::Logits)?;
        let l = params.cfg.layers;
        Ok(Self { params, keys: vec![Vec::new(); l], values: vec![Vec::new(); l], len: 0 })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn linear(&self, x: &[f64], w: usize, b: usize, out_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_dim];
        kernels::matmul_acc(x, self.params.t(w), &mut out, 1, x.len(), out_dim);
        for (o, bb) in out.iter_mut().zip(self.params.t(b)) {
            *o += bb;
        }
        out
    }

    fn norm(&self, x: &[f64], g: usize, b: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, &mut out);
        for (o, gg) in out.iter_mut().zip(self.params.t(g)) {
            *o *= gg;
        }
        for (o, bb) in out.iter_mut().zip(self.params.t(b)) {
            *o += bb;
        }
        out
    }

    /// Feeds one token and returns the logits row at its position.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>, ModelError> {
        let p = self.params;
        let cfg = &p.cfg;
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let pos = self.len;
        check_len(cfg, pos + 1)?;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::Contract(format!("token id {token} outside vocab of {}", cfg.vocab_size)));
        }
        let te = &p.t(TOK_EMB)[token as usize * d..(token as usize + 1) * d];
        let pe = &p.t(POS_EMB)[pos * d..(pos + 1) * d];
        let mut x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.layers {
            let w = |o: usize| layer_idx(l, o);
            let h = self.norm(&x, w(LN1_G), w(LN1_B));
            let q = self.linear(&h, w(WQ), w(BQ), d);
            let k = self.linear(&h, w(WK), w(BK), d);
            let v = self.linear(&h, w(WV), w(BV), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let n = pos + 1;
            let mut cat = vec![0.0; d];
            for hd in 0..cfg.heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kh = &keys[j * d + off..j * d + off + dh];
                        let mut s = 0.0;
                        for (a, b) in qh.iter().zip(kh) {
                            s += a * b;
                        }
                        s * scale
                    })
                    .collect();
                kernels::softmax_in_place(&mut scores);
                let out = &mut cat[off..off + dh];
                for (j, &a) in scores.iter().enumerate() {
                    let vh = &values[j * d + off..j * d + off + dh];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += a * vv;
                    }
                }
            }
            let o = self.linear(&cat, w(WO), w(BO), d);
            for (xx, oo) in x.iter_mut().zip(&o) {
                *xx += oo;
            }
            let h2 = self.norm(&x, w(LN2_G), w(LN2_B));
            let mut f = self.linear(&h2, w(W1), w(B1), cfg.d_ff);
            for v in f.iter_mut() {
                *v = kernels::gelu(*v);
            }
            let f = self.linear(&f, w(W2), w(B2), d);
            for (xx, ff) in x.iter_mut().zip(&f) {
                *xx += ff;
            }
        }
        let lnf = p.tensors.len() - 4;
        let h = self.norm(&x, lnf, lnf + 1);
        self.len += 1;
        Ok(self.linear(&h, p.head_w(), p.head_w() + 1, cfg.out_dim()))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn decode(
    params: &ModelParams,
    input: &[TokenId],
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> Result<TokenId, ModelError>,
) -> Result<Vec<TokenId>, ModelError> {
    if max_len == 0 {
        return Err(ModelError::Contract("max_len must be at least 1".into()));
    }
    if input.is_empty() {
        return Err(ModelError::Contract("empty prompt".into()));
    }
    let needed = input.len() + max_len - 1;
    if needed > params.cfg.max_seq {
        return Err(ModelError::Length { len: needed, max: params.cfg.max_seq });
    }
    let mut dec = Decoder::new(params)?;
    let mut row = Vec::new();
    for &t in input {
        row = dec.step(t)?;
    }
    let mut out = Vec::with_capacity(max_len);
    loop {
        let next = pick(&row)?;
        out.push(next);
        if next == EOS || out.len() == max_len {
            return Ok(out);
        }
        row = dec.step(next)?;
    }
}

/// Ancestral sampling at `temperature`; `0` means greedy. Stops after EOS or `max_len` tokens.
pub fn sample(
    params: &ModelParams,
    input: &[TokenId],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TokenId>, ModelError> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(ModelError::Config(format!("temperature {temperature}")));
    }
    if temperature == 0.0 {
        return greedy(params, input, max_len);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    decode(params, input, max_len, |row| {
        let mut probs: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        kernels::softmax_in_place(&mut probs);
        let dist = WeightedIndex::new(&probs).map_err(|e| ModelError::Contract(format!("sampling weights: {e}")))?;
        Ok(dist.sample(&mut rng) as TokenId)
    })
}

/// Argmax decoding; ties resolve to the lowest id.
pub fn greedy(params: &ModelParams, input: &[TokenId], max_len: usize) -> Result<Vec<TokenId>, ModelError> {
    decode(params, input, max_len, |row| Ok(argmax(row) as TokenId))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 8, layers: 2, heads: 2, d_ff: 16, max_seq: 24, head }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny(HeadKind::Logits), 5).unwrap();
        let b = ModelParams::init(tiny(HeadKind::Logits), 5).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(tiny(HeadKind::Logits), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_dims() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 0).unwrap();
        let out = forward_logits(&p, &[2, 5, 6]).unwrap();
        assert_eq!(out.shape(), &[3, 11]);
        let s = ModelParams::init(tiny(HeadKind::Scalar), 0).unwrap();
        let v = forward_scalar(&s, &[2, 5, 6, 7]).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { heads: 3, ..tiny(HeadKind::Logits) };
        assert!(matches!(ModelParams::init(bad, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        for head in [HeadKind::Logits, HeadKind::Scalar] {
            let p = ModelParams::init(tiny(head), 1).unwrap();
            let a = [2, 5, 6, 7, 8];
            let b = [2, 5, 6, 9, 10];
            let run = |t: &[TokenId]| {
                let mut tape = Tape::new();
                let bound = p.bind(&mut tape, false);
                let v = head_on_tape(&mut tape, &p, &bound, t).unwrap();
                tape.value(v).clone()
            };
            let (ra, rb) = (run(&a), run(&b));
            for r in 0..3 {
                assert_eq!(ra.row(r), rb.row(r));
            }
            assert_ne!(ra.row(3), rb.row(3));
        }
    }

    #[test]
    fn rows_are_distributions() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 2).unwrap();
        let logits = forward_logits(&p, &[2, 5, 6, 7]).unwrap();
        for r in 0..4 {
            let mut row = logits.row(r).to_vec();
            kernels::softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_matches_unbatched() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 3).unwrap();
        let toks: &[TokenId] = &[2, 6, 7, 3];
        let single = forward_logits(&p, toks).unwrap();
        let batched = forward_logits_batch(&p, &[toks]).unwrap();
        assert_eq!(single, batched[0]);
        let pair = forward_logits_batch(&p, &[&[2, 9], toks]).unwrap();
        assert_eq!(single, pair[1]);
    }

    #[test]
    fn log_prob_cases() {
        let uniform = Tensor::from_rows(&[&[0.0; 4], &[0.0; 4]]);
        for lp in log_prob(&uniform, &[1, 3]).unwrap() {
            assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        }
        let peaked = Tensor::from_rows(&[&[0.0, 1e3, 0.0, 0.0]]);
        assert!(log_prob(&peaked, &[1]).unwrap()[0].abs() < 1e-12);
        let rows = Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
        let lps = log_prob(&rows, &[2, 0]).unwrap();
        for (r, (&a, lp)) in [2usize, 0].iter().zip(lps).enumerate() {
            let mut probs = rows.row(r).to_vec();
            kernels::softmax_in_place(&mut probs);
            assert!((lp.exp() - probs[a]).abs() < 1e-12);
            assert!(lp <= 0.0);
        }
        assert!(matches!(log_prob(&rows, &[0]), Err(ModelError::Contract(_))));
    }

    #[test]
    fn decoder_matches_full_forward_exactly() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 4).unwrap();
        let toks: Vec<TokenId> = vec![2, 5, 9, 6, 10, 7];
        let full = forward_logits(&p, &toks).unwrap();
        let mut dec = Decoder::new(&p).unwrap();
        for (i, &t) in toks.iter().enumerate() {
            let row = dec.step(t).unwrap();
            assert_eq!(row.as_slice(), full.row(i), "position {i}");
        }
    }

    #[test]
    fn sampling_contracts() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 7).unwrap();
        let input = [2, 5, 6];
        let a = sample(&p, &input, 6, 1.0, 11).unwrap();
        let b = sample(&p, &input, 6, 1.0, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert_eq!(sample(&p, &input, 6, 0.0, 1).unwrap(), greedy(&p, &input, 6).unwrap());
        let g = greedy(&p, &input, 6).unwrap();
        assert_eq!(g, greedy(&p, &input, 6).unwrap());
        // greedy picks the argmax of the full forward at each step
        let mut seq = input.to_vec();
        seq.extend_from_slice(&g[..g.len() - 1]);
        let logits = forward_logits(&p, &seq).unwrap();
        for (t, &tok) in g.iter().enumerate() {
            assert_eq!(argmax(logits.row(input.len() - 1 + t)) as TokenId, tok);
        }
        for seed in 0..20 {
            let s = sample(&p, &input, 3, 1.5, seed).unwrap();
            assert!(!s.is_empty() && s.len() <= 3);
        }
    }

    #[test]
    fn overlong_input_is_rejected() {
        let p = ModelParams::init(tiny(HeadKind::Logits), 0).unwrap();
        let long = vec![5; 25];
        assert!(matches!(forward_logits(&p, &long), Err(ModelError::Length { .. })));
        assert!(matches!(greedy(&p, &long[..20], 10), Err(ModelError::Length { .. })));
    }

    #[test]
    fn head_kind_is_checked() {
        let s = ModelParams::init(tiny(HeadKind::Scalar), 0).unwrap();
        assert!(matches!(forward_logits(&s, &[2]), Err(ModelError::HeadKind { .. })));
        let l = ModelParams::init(tiny(HeadKind::Logits), 0).unwrap();
        assert!(matches!(forward_scalar(&l, &[2]), Err(ModelError::HeadKind { .. })));
    }

    #[test]
    fn with_head_keeps_backbone() {
        let base = ModelParams::init(tiny(HeadKind::Logits), 0).unwrap();
        let scalar = base.with_head(HeadKind::Scalar, 9).unwrap();
        let n = base.tensors().len() - 2;
        assert_eq!(&base.tensors()[..n], &scalar.tensors()[..n]);
        assert_eq!(scalar.tensors().last().unwrap().shape(), &[1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::init(tiny(HeadKind::Scalar), 8).unwrap();
        p.save(&path, "reward").unwrap();
        let (q, role) = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(role, "reward");
        let cfg_text = std::fs::read_to_string(dir.path().join("m.ckpt.cfg")).unwrap();
        assert!(cfg_text.contains("head = \"scalar\""), "{cfg_text}");
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        use crate::autodiff::{grad_check, GradCheckOptions};
        let p = ModelParams::init(tiny(HeadKind::Logits), 12).unwrap();
        let toks: Vec<TokenId> = vec![2, 5, 6, 7, 3];
        let cfg = p.cfg;
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var, AutodiffError> {
            let bound = Bound { vars: vars.to_vec() };
            let shell = ModelParams { cfg, names: vec![], tensors: p.tensors.clone() };
            let logits =
                head_on_tape(tape, &shell, &bound, &toks).map_err(|e| AutodiffError::Contract(e.to_string()))?;
            let lp =
                log_prob_on_tape(tape, logits, 2, &toks[2..]).map_err(|e| AutodiffError::Contract(e.to_string()))?;
            Ok(tape.mean(lp))
        };
        let report = grad_check(f, p.tensors(), 1e-6, GradCheckOptions { coords_per_tensor: 6, seed: 1 }).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
