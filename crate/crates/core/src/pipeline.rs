//! Experiment configuration and the staged pipeline behind the command-line tool.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory. After each stage `manifest.json` is rewritten with the config
//! hash, the seeds and a hash of every artifact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, ChattyStyle, CorpusError, Example, ExampleSet, LoadOptions, TaskConfig, Vocab};
use crate::metrics::{self, ComparisonReport, MetricReport, MetricsError, REPORT_COLUMNS};
use crate::mle::{self, MleConfig};
use crate::negatives::{self, Label, NegativesError};
use crate::optim::LrSchedule;
use crate::ppo::{self, PpoConfig, PpoError, PpoLogRow};
use crate::reward::{self, RewardFn, RewardTrainConfig};
use crate::seeding::derive;
use crate::seqmodel::{self, HeadKind, ModelConfig, ModelError, ModelParams};
use crate::verify;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing artifact {artifact}; run `{producer}` first")]
    Missing { artifact: PathBuf, producer: Stage },
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Negatives(#[from] NegativesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenData,
    Pretrain,
    SynthNegatives,
    TrainReward,
    TrainPpo,
    TrainMle,
    Evaluate,
    Report,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::SynthNegatives,
        Stage::TrainReward,
        Stage::TrainPpo,
        Stage::TrainMle,
        Stage::Evaluate,
        Stage::Report,
        Stage::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::SynthNegatives => "synth-negatives",
            Stage::TrainReward => "train-reward",
            Stage::TrainPpo => "train-ppo",
            Stage::TrainMle => "train-mle",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Verify => "verify",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// JSONL file of `{"input", "output"}` records when `source = "jsonl"`.
    pub path: Option<PathBuf>,
    /// Separate JSONL corpus for the base model; the training split otherwise.
    pub pretrain_path: Option<PathBuf>,
    pub n_examples: usize,
    pub n_pretrain: usize,
    /// Style of the synthetic pretraining answers; loaded corpora are used as they are.
    pub pretrain_style: ChattyStyle,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            pretrain_path: None,
            n_examples: 2000,
            n_pretrain: 32000,
            pretrain_style: ChattyStyle::default(),
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(1, HeadKind::Logits);
        Self { d_model: c.d_model, layers: c.layers, heads: c.heads, d_ff: c.d_ff, max_seq: c.max_seq }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            head: HeadKind::Logits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvalConfig {
    /// Evaluate on at most this many test examples.
    pub max_examples: Option<usize>,
    /// Also cut the base model's cleaned output at the first newline.
    pub base_cleaned_truncate: bool,
}


/// Everything a run depends on. Stage seeds are derived from `seeds`; the
/// `seed` and `output_cap` fields of the training sections are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_cap: usize,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub task: TaskConfig,
    pub model: ModelShape,
    pub pretrain: MleConfig,
    pub reward: RewardTrainConfig,
    pub ppo: PpoConfig,
    pub mle: MleConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_cap: 100,
            seeds: Seeds::default(),
            data: DataConfig::default(),
            task: TaskConfig::default(),
            model: ModelShape::default(),
            pretrain: MleConfig { lr: 1e-3, batch_size: 32, schedule: LrSchedule::Constant, ..Default::default() },
            reward: RewardTrainConfig { epochs: 2, ..Default::default() },
            ppo: PpoConfig::default(),
            mle: MleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` as overrides on top of [`ExperimentConfig::default`]. Keys missing from a
    /// section keep the experiment default, not the section type's own default.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, PipelineError> {
        let err = |e: toml::de::Error| PipelineError::Config { path: path.to_path_buf(), message: e.to_string() };
        // A direct parse reports unknown keys and type errors with line numbers.
        toml::from_str::<Self>(text).map_err(err)?;
        let user: toml::Table = toml::from_str(text).map_err(err)?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge_tables(&mut merged, user);
        let cfg = Self::deserialize(merged).map_err(err)?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Uses `seed` for data, model and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds { data: seed, model: seed, train: seed };
        self
    }

    pub fn validate(&self, path: &Path) -> Result<(), PipelineError> {
        let bad = |message: String| Err(PipelineError::Config { path: path.to_path_buf(), message });
        if self.output_cap == 0 {
            return bad("output_cap must be positive".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("data.test_fraction {} not in (0, 1)", self.data.test_fraction));
        }
        let input_cap = match self.data.source {
            DataSource::Synthetic => {
                if let Err(e) = self.task.validate() {
                    return bad(format!("task: {e}"));
                }
                if self.data.n_examples < 2 || self.data.n_pretrain == 0 {
                    return bad("data.n_examples must be at least 2 and data.n_pretrain positive".into());
                }
                if let Err(e) = self.data.pretrain_style.validate() {
                    return bad(format!("data.pretrain_style: {e}"));
                }
                self.task.input_cap
            }
            DataSource::Jsonl => {
                let Some(p) = &self.data.path else {
                    return bad("data.path is required when data.source = \"jsonl\"".into());
                };
                for q in std::iter::once(p).chain(&self.data.pretrain_path) {
                    if !resolve(path, q).exists() {
                        return bad(format!("data file {} does not exist", q.display()));
                    }
                }
                corpus::EXTERNAL_INPUT_CAP
            }
        };
        if input_cap + self.output_cap > self.model.max_seq {
            return bad(format!(
                "model.max_seq {} is shorter than input cap {input_cap} plus output_cap {}",
                self.model.max_seq, self.output_cap
            ));
        }
        if let Err(e) = self.model.config(corpus::NUM_RESERVED + 1).validate() {
            return bad(format!("model: {e}"));
        }
        let checks: [(&str, Result<(), String>); 4] = [
            ("pretrain", self.pretrain.validate().map_err(|e| e.to_string())),
            ("reward", self.reward.validate().map_err(|e| e.to_string())),
            ("ppo", self.ppo.validate().map_err(|e| e.to_string())),
            ("mle", self.mle.validate().map_err(|e| e.to_string())),
        ];
        for (section, r) in checks {
            if let Err(e) = r {
                return bad(format!("[{section}]: {e}"));
            }
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Relative data paths resolve against the config file's directory.
fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config_path.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}

/// Artifact paths relative to the run directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.json";
    pub const VOCAB: &str = "vocab.tsv";
    pub const TRAIN: &str = "data/train.jsonl";
    pub const TEST: &str = "data/test.jsonl";
    pub const PRETRAIN: &str = "data/pretrain.jsonl";
    pub const REWARD_DATA: &str = "data/reward.jsonl";
    pub const BASE: &str = "ckpt/base.ckpt";
    pub const REWARD: &str = "ckpt/reward.ckpt";
    pub const POLICY: &str = "ckpt/policy.ckpt";
    pub const VALUE: &str = "ckpt/value.ckpt";
    pub const MLE: &str = "ckpt/mle.ckpt";
    pub const PRETRAIN_LOG: &str = "logs/pretrain.csv";
    pub const REWARD_LOG: &str = "logs/reward.csv";
    pub const PPO_LOG: &str = "logs/ppo.csv";
    pub const MLE_LOG: &str = "logs/mle.csv";
    pub const EVAL_SUMMARY: &str = "eval/summary.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_MD: &str = "report.md";
    pub const VERIFY_LOG: &str = "verify.txt";

    pub fn predictions(variant: &str) -> String {
        format!("eval/{variant}.jsonl")
    }
}

/// A configured run rooted at one output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub config_path: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub metrics: MetricReport,
    pub abs_excess_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_examples: usize,
    pub variants: Vec<VariantSummary>,
    /// Held-out mean token score per reward label.
    pub reward_scores: BTreeMap<String, f64>,
    /// Positive mean minus the mean of the negative category means.
    pub reward_separation: f64,
}

impl EvalSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    seeds: Seeds,
    artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

#[derive(Serialize)]
struct Prediction<'a> {
    input: &'a str,
    reference: &'a str,
    prediction: &'a str,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, config_path: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self { cfg, config_path: config_path.into(), out: out.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, producer: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Missing { artifact: p, producer })
        }
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>, PipelineError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<(), PipelineError> {
        let mut w = self.create(rel)?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&self.path(rel)))
    }

    fn vocab(&self) -> Result<Arc<Vocab>, PipelineError> {
        let p = self.require(artifacts::VOCAB, Stage::GenData)?;
        let f = File::open(&p).map_err(io_err(&p))?;
        Ok(Arc::new(Vocab::read_tsv(BufReader::new(f))?))
    }

    fn examples(&self, rel: &str, vocab: &Arc<Vocab>) -> Result<ExampleSet, PipelineError> {
        let p = self.require(rel, Stage::GenData)?;
        let f = File::open(&p).map_err(io_err(&p))?;
        let opts = LoadOptions { input_cap: usize::MAX, ..Default::default() };
        Ok(corpus::load_examples_from(BufReader::new(f), opts, Some(vocab.clone()))?.set)
    }

    fn write_set(&self, rel: &str, set: &ExampleSet) -> Result<(), PipelineError> {
        let mut w = self.create(rel)?;
        set.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(io_err(&self.path(rel)))
    }

    fn checkpoint(&self, rel: &str, producer: Stage) -> Result<ModelParams, PipelineError> {
        let p = self.require(rel, producer)?;
        Ok(ModelParams::load(&p)?.0)
    }

    fn save(&self, params: &ModelParams, rel: &str, role: &str) -> Result<(), PipelineError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(params.save(&p, role)?)
    }

    fn write_log(&self, rel: &str, header: &str, rows: &[String]) -> Result<(), PipelineError> {
        let mut text = String::with_capacity(rows.len() * 48);
        text.push_str(header);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.write_text(rel, &text)
    }

    /// Runs one stage and refreshes the manifest.
    pub fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        self.write_text(artifacts::CONFIG, &self.cfg.to_toml())?;
        match stage {
            Stage::GenData => self.gen_data()?,
            Stage::Pretrain => self.pretrain()?,
            Stage::SynthNegatives => self.synth_negatives()?,
            Stage::TrainReward => self.train_reward()?,
            Stage::TrainPpo => self.train_ppo()?,
            Stage::TrainMle => self.train_mle()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
            Stage::Verify => self.verify()?,
        }
        self.write_manifest()
    }

    /// Every stage except `verify`, in dependency order.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        Stage::ALL.into_iter().filter(|s| *s != Stage::Verify).try_for_each(|s| self.run(s))
    }

    fn gen_data(&self) -> Result<(), PipelineError> {
        let c = &self.cfg;
        let s = c.seeds.data;
        let (full, pretrain) = match c.data.source {
            DataSource::Synthetic => (
                corpus::gen_extraction_task(s, c.data.n_examples, &c.task)?,
                Some(corpus::chatty(
                    &corpus::gen_extraction_task(derive(s, 1), c.data.n_pretrain, &c.task)?,
                    &c.data.pretrain_style,
                    derive(s, 5),
                )?),
            ),
            DataSource::Jsonl => {
                let path = resolve(&self.config_path, c.data.path.as_deref().expect("validated"));
                let loaded = corpus::load_examples(&path, LoadOptions::default())?;
                let pre = match &c.data.pretrain_path {
                    Some(p) => {
                        let f = File::open(resolve(&self.config_path, p)).map_err(io_err(p))?;
                        let opts = LoadOptions::default();
                        Some(corpus::load_examples_from(BufReader::new(f), opts, Some(loaded.set.vocab.clone()))?.set)
                    }
                    None => None,
                };
                (loaded.set, pre)
            }
        };
        let (train, test) = corpus::split(&full, c.data.test_fraction, derive(s, 2))?;
        let pretrain = pretrain.unwrap_or_else(|| train.clone());
        let mut w = self.create(artifacts::VOCAB)?;
        full.vocab.write_tsv(&mut w).and_then(|_| w.flush()).map_err(io_err(&self.path(artifacts::VOCAB)))?;
        self.write_set(artifacts::TRAIN, &train)?;
        self.write_set(artifacts::TEST, &test)?;
        self.write_set(artifacts::PRETRAIN, &pretrain)
    }

    fn pretrain(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let data = self.examples(artifacts::PRETRAIN, &vocab)?;
        let c = &self.cfg;
        let init = ModelParams::init(c.model.config(vocab.len()), c.seeds.model)?;
        let cfg = MleConfig { seed: derive(c.seeds.train, 1), ..c.pretrain };
        let mut rows = Vec::new();
        let base =
            mle::train_mle(init, &data.examples, &cfg, |r| rows.push(format!("{},{},{}", r.step, r.loss, r.lr)))?;
        self.save(&base, artifacts::BASE, "base")?;
        self.write_log(artifacts::PRETRAIN_LOG, "step,loss,lr", &rows)
    }

    fn synth_negatives(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let train = self.examples(artifacts::TRAIN, &vocab)?;
        let data = negatives::build_reward_dataset(&train, derive(self.cfg.seeds.data, 3), self.cfg.output_cap)?;
        let mut w = self.create(artifacts::REWARD_DATA)?;
        negatives::write_jsonl(&data, &mut w)
            .and_then(|_| w.flush())
            .map_err(io_err(&self.path(artifacts::REWARD_DATA)))
    }

    fn train_reward(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let p = self.require(artifacts::REWARD_DATA, Stage::SynthNegatives)?;
        let f = File::open(&p).map_err(io_err(&p))?;
        let data = negatives::read_jsonl(BufReader::new(f), &vocab)?;
        let base = self.checkpoint(artifacts::BASE, Stage::Pretrain)?;
        let c = &self.cfg;
        let init = base.with_head(HeadKind::Scalar, derive(c.seeds.model, 1))?;
        let cfg = RewardTrainConfig { seed: derive(c.seeds.train, 2), ..c.reward };
        let mut rows = Vec::new();
        let trained =
            reward::train_reward(init, &data, &cfg, |r| rows.push(format!("{},{},{}", r.step, r.loss, r.lr)))?;
        self.save(&trained, artifacts::REWARD, "reward")?;
        self.write_log(artifacts::REWARD_LOG, "step,loss,lr", &rows)
    }

    fn reward_fn(&self) -> Result<RewardFn, PipelineError> {
        let params = self.checkpoint(artifacts::REWARD, Stage::TrainReward)?;
        let mut f = RewardFn::new(params, self.cfg.output_cap)?;
        f.conditioning = self.cfg.reward.conditioning;
        Ok(f)
    }

    fn train_ppo(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let train = self.examples(artifacts::TRAIN, &vocab)?;
        let base = self.checkpoint(artifacts::BASE, Stage::Pretrain)?;
        let reward = self.reward_fn()?;
        let c = &self.cfg;
        let value = base.with_head(HeadKind::Scalar, derive(c.seeds.model, 2))?;
        let cfg = PpoConfig { seed: derive(c.seeds.train, 3), output_cap: c.output_cap, ..c.ppo };
        let mut rows = Vec::new();
        let (policy, value) = ppo::train(base, value, &reward, &train, &cfg, |r| rows.push(r.csv()))?;
        self.save(&policy, artifacts::POLICY, "policy")?;
        self.save(&value, artifacts::VALUE, "value")?;
        self.write_log(artifacts::PPO_LOG, PpoLogRow::CSV_HEADER, &rows)
    }

    fn train_mle(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let train = self.examples(artifacts::TRAIN, &vocab)?;
        let base = self.checkpoint(artifacts::BASE, Stage::Pretrain)?;
        let cfg = MleConfig { seed: derive(self.cfg.seeds.train, 4), ..self.cfg.mle };
        let mut rows = Vec::new();
        let tuned =
            mle::train_mle(base, &train.examples, &cfg, |r| rows.push(format!("{},{},{}", r.step, r.loss, r.lr)))?;
        self.save(&tuned, artifacts::MLE, "mle")?;
        self.write_log(artifacts::MLE_LOG, "step,loss,lr", &rows)
    }

    fn evaluate(&self) -> Result<(), PipelineError> {
        let vocab = self.vocab()?;
        let mut test = self.examples(artifacts::TEST, &vocab)?;
        if let Some(m) = self.cfg.eval.max_examples {
            test.examples.truncate(m);
        }
        let base = self.checkpoint(artifacts::BASE, Stage::Pretrain)?;
        let mle_model = self.checkpoint(artifacts::MLE, Stage::TrainMle)?;
        let rl = self.checkpoint(artifacts::POLICY, Stage::TrainPpo)?;
        let reward = self.reward_fn()?;

        let refs: Vec<&str> = test.iter().map(|e| e.output_text.as_str()).collect();
        let decode = |m: &ModelParams| -> Result<Vec<String>, PipelineError> {
            test.iter().map(|e| Ok(vocab.decode(&seqmodel::greedy(m, &e.input_tokens, self.cfg.output_cap)?))).collect()
        };
        let base_out = decode(&base)?;
        let mle_out = decode(&mle_model)?;
        let rl_out = decode(&rl)?;
        let base_clean: Vec<String> = base_out
            .iter()
            .map(|t| {
                let s = mle::strip_sure_preamble(t);
                if self.cfg.eval.base_cleaned_truncate {
                    mle::truncate_after_newline(&s)
                } else {
                    s
                }
            })
            .collect();
        let mle_clean: Vec<String> = mle_out.iter().map(|t| mle::truncate_after_newline(t)).collect();

        let mut variants = Vec::new();
        for (name, outs) in REPORT_COLUMNS.iter().zip([&base_out, &mle_out, &rl_out, &base_clean, &mle_clean]) {
            self.write_predictions(name, &test, outs)?;
            variants.push(VariantSummary {
                name: name.to_string(),
                metrics: metrics::evaluate(outs, &refs)?,
                abs_excess_length: metrics::abs_excess_length(outs, &refs)?,
            });
        }

        let held_out = negatives::build_reward_dataset(&test, derive(self.cfg.seeds.data, 4), self.cfg.output_cap)?;
        let by_label = reward::mean_scores_by_label(&reward.params, &held_out, reward.conditioning)?;
        let positive = by_label.get(&Label::Positive).copied().unwrap_or(f64::NAN);
        let negs: Vec<f64> = by_label.iter().filter(|(l, _)| **l != Label::Positive).map(|(_, v)| *v).collect();
        let neg_mean = negs.iter().sum::<f64>() / negs.len() as f64;
        let summary = EvalSummary {
            n_examples: test.len(),
            variants,
            reward_scores: by_label.into_iter().map(|(l, v)| (l.name().to_string(), v)).collect(),
            reward_separation: positive - neg_mean,
        };
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        self.write_text(artifacts::EVAL_SUMMARY, &(json + "\n"))
    }

    fn write_predictions(&self, variant: &str, test: &ExampleSet, outs: &[String]) -> Result<(), PipelineError> {
        let rel = artifacts::predictions(variant);
        let mut text = String::new();
        for (e, o) in test.iter().zip(outs) {
            let line = Prediction { input: &e.input_text, reference: &e.output_text, prediction: o };
            text.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
            text.push('\n');
        }
        self.write_text(&rel, &text)
    }

    pub fn eval_summary(&self) -> Result<EvalSummary, PipelineError> {
        let p = self.require(artifacts::EVAL_SUMMARY, Stage::Evaluate)?;
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Parse { path: p, message: e.to_string() })
    }

    fn report(&self) -> Result<(), PipelineError> {
        let summary = self.eval_summary()?;
        let columns = REPORT_COLUMNS
            .iter()
            .map(|c| {
                summary.variant(c).map(|v| (c.to_string(), v.metrics.clone())).ok_or_else(|| PipelineError::Parse {
                    path: self.path(artifacts::EVAL_SUMMARY),
                    message: format!("no variant {c}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let report = ComparisonReport::new(columns)?;
        self.write_text(artifacts::REPORT_CSV, &report.to_csv())?;
        self.write_text(artifacts::REPORT_MD, &report.to_markdown())
    }

    fn verify(&self) -> Result<(), PipelineError> {
        let results = verify::run_all();
        let mut text = String::new();
        for r in &results {
            text.push_str(&r.line());
            text.push('\n');
        }
        self.write_text(artifacts::VERIFY_LOG, &text)?;
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Verify(failed.join(", ")))
        }
    }

    /// Hashes every artifact under the run directory.
    pub fn write_manifest(&self) -> Result<(), PipelineError> {
        let mut files = Vec::new();
        collect_files(&self.out, &mut files).map_err(io_err(&self.out))?;
        let mut artifacts = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&self.out).expect("under run dir").to_string_lossy().replace('\\', "/");
            if rel == artifacts::MANIFEST {
                continue;
            }
            let bytes = fs::read(&f).map_err(io_err(&f))?;
            artifacts.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
        let m = Manifest { config_sha256: self.cfg.sha256(), seeds: self.cfg.seeds, artifacts, note: None };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        self.write_text(artifacts::MANIFEST, &(json + "\n"))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads the prediction file of one report column.
pub fn read_predictions(run: &Run, variant: &str) -> Result<Vec<(String, String)>, PipelineError> {
    #[derive(Deserialize)]
    struct Line {
        reference: String,
        prediction: String,
    }
    let p = run.require(&artifacts::predictions(variant), Stage::Evaluate)?;
    let f = File::open(&p).map_err(io_err(&p))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(&p))?;
            let x: Line = serde_json::from_str(&l)
                .map_err(|e| PipelineError::Parse { path: p.clone(), message: e.to_string() })?;
            Ok((x.prediction, x.reference))
        })
        .collect()
}

/// The examples of one data split.
pub fn load_split(run: &Run, rel: &str) -> Result<Vec<Example>, PipelineError> {
    let vocab = run.vocab()?;
    Ok(run.examples(rel, &vocab)?.examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.sha256(), back.sha256());
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = ExperimentConfig::from_toml("[ppo]\ngama = 0.9\n", Path::new("c.toml")).unwrap_err().to_string();
        assert!(err.contains("gama") && err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("output_cap = 300\n", Path::new("c.toml")).unwrap_err().to_string();
        assert!(err.contains("max_seq"), "{err}");
        let err =
            ExperimentConfig::from_toml("[data]\nsource = \"jsonl\"\n", Path::new("c.toml")).unwrap_err().to_string();
        assert!(err.contains("data.path"), "{err}");
    }

    #[test]
    fn missing_upstream_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(ExperimentConfig::default(), "c.toml", dir.path());
        let err = run.run(Stage::TrainReward).unwrap_err();
        assert!(matches!(err, PipelineError::Missing { producer: Stage::GenData, .. }), "{err}");
        assert!(err.to_string().contains("run `gen-data` first"));
    }

    #[test]
    fn partial_section_keeps_experiment_defaults() {
        let cfg = ExperimentConfig::from_toml("[pretrain]\nmax_steps = 5\n", Path::new("c.toml")).unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(cfg.pretrain.max_steps, Some(5));
        assert_eq!(cfg.pretrain.batch_size, d.pretrain.batch_size);
        assert_eq!(cfg.pretrain.schedule, d.pretrain.schedule);
        assert_eq!(cfg.reward, d.reward);
        let err =
            ExperimentConfig::from_toml("[data.pretrain_style]\nramble_prob = 2.0\n", Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("pretrain_style"), "{err}");
    }

    #[test]
    fn seed_override_sets_all_seeds() {
        let c = ExperimentConfig::default().with_seed(9);
        assert_eq!(c.seeds, Seeds { data: 9, model: 9, train: 9 });
    }
}
