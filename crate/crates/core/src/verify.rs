//! Runtime oracle suites behind the `verify` stage.

use rand::Rng;

use crate::autodiff::GradCheckOptions;
use crate::corpus::{gen_extraction_task, Example, ExampleSet, TaskConfig, TokenId, EOS};
use crate::metrics::{self, LengthPair, RougeTriple};
use crate::mle;
use crate::negatives::{self, NegCategory, RewardDatum};
use crate::optim::grad_check_params;
use crate::ppo::{self, RolloutMode};
use crate::reward::{self, Conditioning, RewardFn};
use crate::seeding::rng_for;
use crate::seqmodel::{HeadKind, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        gae_oracle(),
        value_target_oracle(),
        objective_examples(),
        length_penalty_examples(),
        metric_oracles(),
        post_processing(),
        negative_properties(),
        gradient_checks(),
    ]
}

/// Direct double sum of discounted TD residuals.
fn gae_direct(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
    (0..r.len())
        .map(|t| (t..r.len()).map(|k| (g * l).powi((k - t) as i32) * (r[k] + g * v[k + 1] - v[k])).sum())
        .collect()
}

fn gae_oracle() -> CheckResult {
    let mut rng = rng_for(17, 0);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let t = rng.random_range(1..=8);
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..=t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = [0.5, 0.99999][i % 2];
        let l = [0.0, 0.95, 1.0][i % 3];
        let a = ppo::gae(&r, &v, g, l).expect("lengths agree");
        for (x, y) in a.iter().zip(gae_direct(&r, &v, g, l)) {
            worst = worst.max((x - y).abs());
        }
    }
    CheckResult::new("gae", worst <= 1e-10, format!("max deviation {worst:e} over 100 cases"))
}

fn value_target_oracle() -> CheckResult {
    let mut rng = rng_for(17, 1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let t = rng.random_range(1..=8);
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = [0.5, 0.99999, 1.0][i % 3];
        let got = ppo::value_targets(&r, g);
        let direct: Vec<f64> = (0..=t).map(|s| (s..t).map(|k| g.powi((k - s) as i32) * r[k]).sum()).collect();
        for (x, y) in got.iter().zip(&direct) {
            worst = worst.max((x - y).abs());
        }
        if got.len() != t + 1 || got[t] != 0.0 {
            worst = f64::INFINITY;
        }
    }
    CheckResult::new("value-targets", worst <= 1e-10, format!("max deviation {worst:e} over 100 cases"))
}

fn objective_examples() -> CheckResult {
    let eq = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let cases = [
        ppo::ppo_objective(&[-1.0, -2.0], &[-1.0, -2.0], &[2.0, -1.0], 0.2).map(|v| eq(v, 0.5)),
        ppo::ppo_objective(&[1.5f64.ln()], &[0.0], &[1.0], 0.2).map(|v| eq(v, 1.2)),
        ppo::ppo_objective(&[0.5f64.ln()], &[0.0], &[-1.0], 0.2).map(|v| eq(v, -0.8)),
        ppo::value_loss(&[0.0, 0.0], &[1.0, 0.0]).map(|v| eq(v, 0.5)),
    ];
    let ok = cases.iter().filter(|c| matches!(c, Ok(true))).count();
    CheckResult::new("ppo-objective", ok == cases.len(), format!("{ok}/{} examples", cases.len()))
}

fn length_penalty_examples() -> CheckResult {
    let p = reward::apply_length_penalty(&[1.0; 8], 8, 5);
    let ok = matches!(&p, Ok(v) if v[..5] == [1.0; 5] && v[5..] == [-1.5; 3])
        && reward::apply_length_penalty(&[0.5; 5], 5, 5).ok() == Some(vec![0.5; 5])
        && reward::apply_length_penalty(&[0.2; 3], 3, 5).ok() == Some(vec![0.2; 3]);
    CheckResult::new("length-penalty", ok, "three examples")
}

fn random_text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(0..12);
    (0..n).map(|_| ["a", "b", "c", "d", "E", "f"][rng.random_range(0..6)]).collect::<Vec<_>>().join(" ")
}

fn metric_oracles() -> CheckResult {
    let near = |t: RougeTriple, p: f64, r: f64| (t.precision - p).abs() < 1e-12 && (t.recall - r).abs() < 1e-12;
    let mut failures = Vec::new();
    if !near(metrics::rouge_n("the cat sat", "the cat slept", 1), 2.0 / 3.0, 2.0 / 3.0) {
        failures.push("rouge1");
    }
    if !near(metrics::rouge_n("the cat sat", "the cat slept", 2), 0.5, 0.5) {
        failures.push("rouge2");
    }
    if !near(metrics::rouge_l("the cat sat", "the cat slept"), 2.0 / 3.0, 2.0 / 3.0) {
        failures.push("rougeL");
    }
    if !near(metrics::length_adjust(RougeTriple::new(0.5, 1.0), LengthPair { np: 4, ng: 2 }), 0.5, 0.5)
        || !near(metrics::length_adjust(RougeTriple::new(1.0, 0.25), LengthPair { np: 1, ng: 4 }), 0.25, 0.25)
    {
        failures.push("length-adjust");
    }
    let mut rng = rng_for(17, 2);
    let mut gap = 0.0f64;
    for _ in 0..200 {
        let (p, r) = (random_text(&mut rng), random_text(&mut rng));
        let report = metrics::evaluate(&[&p], &[&r]).expect("aligned");
        gap = gap.max((report.get("la-rouge1-precision").unwrap() - report.get("la-rouge1-recall").unwrap()).abs());
        if report.rows.iter().take(18).any(|(_, v)| !(0.0..=1.0).contains(v)) {
            failures.push("range");
        }
    }
    if gap > 1e-12 {
        failures.push("la-rouge1 precision/recall");
    }
    failures.dedup();
    CheckResult::new("metrics", failures.is_empty(), format!("failures: {failures:?}; max la-rouge1 P/R gap {gap:e}"))
}

fn post_processing() -> CheckResult {
    let mut ok = mle::strip_sure_preamble("Sure, here is a summary:\nAlice met Bob.") == "Alice met Bob."
        && mle::strip_sure_preamble("Sure, but no newline") == "Sure, but no newline"
        && mle::truncate_after_newline("A summary.\nA summary.\nA summ") == "A summary."
        && mle::truncate_after_newline("\nleading newline").is_empty();
    let mut rng = rng_for(17, 3);
    let pieces = ["Sure,", " x", "\n", "y ", "Sure, ", "z"];
    for _ in 0..1000 {
        let s: String = (0..rng.random_range(0..8)).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
        let a = mle::strip_sure_preamble(&s);
        let b = mle::truncate_after_newline(&s);
        ok &= mle::strip_sure_preamble(&a) == a && mle::truncate_after_newline(&b) == b && b.len() <= s.len();
    }
    CheckResult::new("post-processing", ok, "examples and idempotence on 1000 strings")
}

fn sorted(mut v: Vec<TokenId>) -> Vec<TokenId> {
    v.sort_unstable();
    v
}

fn content(t: &[TokenId]) -> &[TokenId] {
    t.strip_suffix(&[EOS]).unwrap_or(t)
}

fn negative_properties() -> CheckResult {
    let set = gen_extraction_task(17, 200, &TaskConfig::default()).expect("default task is valid");
    let cap = 100;
    let mut problems = Vec::new();
    for cat in NegCategory::ALL {
        let negs = match negatives::synthesize(cat, &set, 5, cap) {
            Ok(n) => n,
            Err(e) => {
                problems.push(format!("{}: {e}", cat.name()));
                continue;
            }
        };
        if negs.len() != set.len() {
            problems.push(format!("{}: count {}", cat.name(), negs.len()));
        }
        for (d, ex) in negs.iter().zip(set.iter()) {
            let out = &d.example.output_tokens;
            let good = match cat {
                NegCategory::Shuffled => sorted(content(out).to_vec()) == sorted(content(&ex.output_tokens).to_vec()),
                NegCategory::RePaired => content(out) != content(&ex.output_tokens),
                NegCategory::InputEcho => content(out) == ex.input_body(),
                NegCategory::RepetitiveTail => {
                    negatives::detect_repeated_tail(out, negatives::TAIL_MAX_BLOCK).is_some()
                }
                NegCategory::RandomTokens => out.len() <= cap,
            };
            if !good || out.len() > cap {
                problems.push(format!("{} on example {}", cat.name(), ex.id));
                break;
            }
        }
    }
    CheckResult::new("negatives", problems.is_empty(), format!("{problems:?}"))
}

fn tiny_task() -> ExampleSet {
    let task = TaskConfig { input_len_min: 5, input_len_max: 7, marked_min: 1, marked_max: 3, ..Default::default() };
    gen_extraction_task(17, 4, &task).expect("valid task")
}

fn gradient_checks() -> CheckResult {
    let set = tiny_task();
    let cfg = ModelConfig {
        vocab_size: set.vocab.len(),
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        max_seq: 32,
        head: HeadKind::Logits,
    };
    let opts = GradCheckOptions { coords_per_tensor: 3, seed: 17 };
    let run = || -> Result<Vec<(&'static str, f64)>, String> {
        let e = |x: ModelError| x.to_string();
        let policy = ModelParams::init(cfg, 1).map_err(e)?;
        let value = policy.with_head(HeadKind::Scalar, 2).map_err(e)?;
        let rm = policy.with_head(HeadKind::Scalar, 3).map_err(e)?;
        let rfn = RewardFn::new(rm.clone(), 8).map_err(e)?;
        let batch: Vec<&Example> = set.iter().collect();
        let pcfg = ppo::PpoConfig { output_cap: 8, ..Default::default() };
        let trajs = ppo::rollout(&policy, &value, &rfn, &batch, RolloutMode::Sampled, &[1, 2, 3, 4], &pcfg)
            .map_err(|x| x.to_string())?;
        let data: Vec<RewardDatum> = negatives::build_reward_dataset(&set, 1, 8).map_err(|x| x.to_string())?;
        let refs: Vec<&RewardDatum> = data.iter().take(4).collect();
        let g = |r: Result<crate::autodiff::GradCheckReport, _>| {
            r.map(|x| x.max_rel_error).map_err(|x: crate::autodiff::AutodiffError| x.to_string())
        };
        Ok(vec![
            (
                "policy",
                g(grad_check_params(&policy, 1e-6, opts, |t, b| {
                    ppo::policy_objective_on_tape(t, &policy, b, &trajs, 0.2)
                        .map(|p| p.objective)
                        .map_err(|x| ModelError::Contract(x.to_string()))
                }))?,
            ),
            (
                "value",
                g(grad_check_params(&value, 1e-6, opts, |t, b| {
                    ppo::value_loss_on_tape(t, &value, b, &trajs).map_err(|x| ModelError::Contract(x.to_string()))
                }))?,
            ),
            (
                "reward",
                g(grad_check_params(&rm, 1e-6, opts, |t, b| {
                    reward::weighted_loss_on_tape(t, &rm, b, &refs, Conditioning::Inclusive, 0.1)
                }))?,
            ),
            ("mle", g(grad_check_params(&policy, 1e-6, opts, |t, b| mle::nll_on_tape(t, &policy, b, &batch)))?),
        ])
    };
    match run() {
        Ok(errs) => {
            let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            CheckResult::new("gradients", worst < 1e-4, format!("{errs:?}"))
        }
        Err(e) => CheckResult::new("gradients", false, e),
    }
}
