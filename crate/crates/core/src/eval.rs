//! Metric kernels and ablation runners.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::agent::{run_batch, Actor, Agent, AgentConfig, AgentError, EpisodeLog};
use crate::backends::{
    answer_polarity, ground_truth_polarity, BackendError, OraclePerception, PerceptionModel,
    ReasoningModel, ScriptedOracleConfig, QUESTION_PREFIX,
};
use crate::dqa::{str_enum, DqaConfig, MergeStrategy, PerceptionMode};
use crate::env::household::{HouseholdConfig, HouseholdEnv, Split, TaskFamily, TaskSpec};
use crate::env::nav::distance;
use crate::exec::Exec;
use crate::templates::{PromptTemplates, Template, RETRY_SUFFIX};
use crate::types::{Environment, NavTrace, Observation, Question, Symbolic};
use crate::util::{keyed_rng, normalize_tokens, token_proxy_len};

pub use crate::env::nav::SUCCESS_RADIUS;

const BOOTSTRAP_RESAMPLES: usize = 1000;
const ORACLE_QUESTIONS_JSON: &str = include_str!("../data/oracle_questions.json");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown ablation suite: {0}")]
    UnknownSuite(String),
    #[error("inconsistent transcript in {episode} at step {step}: {detail}")]
    InconsistentTranscript {
        episode: String,
        step: usize,
        detail: String,
    },
    #[error("oracle question fixture: {0}")]
    Fixture(String),
    #[error("no episodes to evaluate")]
    Empty,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("report serialization: {0}")]
    Report(String),
}

impl EvalError {
    pub fn backend(&self) -> Option<&BackendError> {
        match self {
            EvalError::Agent(e) => e.backend(),
            EvalError::Backend(e) => Some(e),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Navigation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    #[serde(rename = "NE")]
    pub ne: f64,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "OSR")]
    pub osr: f64,
    #[serde(rename = "SPL")]
    pub spl: f64,
}

/// Metrics for one episode. The last visited position is the stop position,
/// so an episode cut off by the step cap stops where it stands.
pub fn nav_metrics(trace: &NavTrace) -> NavMetrics {
    let stop = trace.positions.last().copied().unwrap_or(trace.goal);
    let ne = distance(&stop, &trace.goal);
    let sr = f64::from(u8::from(ne <= SUCCESS_RADIUS));
    let closest = trace
        .positions
        .iter()
        .map(|p| distance(p, &trace.goal))
        .fold(ne, f64::min);
    let osr = f64::from(u8::from(closest <= SUCCESS_RADIUS));
    let (l, p) = (trace.shortest_path_length, trace.walked_length);
    let spl = if sr > 0.0 && l.max(p) > 0.0 {
        sr * l / l.max(p)
    } else {
        sr
    };
    NavMetrics { ne, sr, osr, spl }
}

pub fn mean_nav_metrics(all: &[NavMetrics]) -> Option<NavMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let sum = |f: fn(&NavMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some(NavMetrics {
        ne: sum(|m| m.ne),
        sr: sum(|m| m.sr),
        osr: sum(|m| m.osr),
        spl: sum(|m| m.spl),
    })
}

// ---------------------------------------------------------------------------
// Description quality
// ---------------------------------------------------------------------------

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1 over normalized tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (normalize_tokens(candidate), normalize_tokens(reference));
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Exact unigram alignment in candidate order. Each token prefers the
/// reference slot right after the previous match, then the earliest free one.
fn align(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for (i, tok) in c.iter().enumerate() {
        let free = |j: usize| !used[j] && &r[j] == tok;
        let j = prev
            .map(|p| p + 1)
            .filter(|&j| j < r.len() && free(j))
            .or_else(|| (0..r.len()).find(|&j| free(j)));
        if let Some(j) = j {
            used[j] = true;
            out.push((i, j));
        }
        prev = j;
    }
    out
}

/// METEOR with exact matching only.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (normalize_tokens(candidate), normalize_tokens(reference));
    let pairs = align(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Verdict of the three-way description judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeVerdict {
    A,
    B,
    C,
    Tie,
}

pub fn parse_judge_verdict(output: &str) -> Option<JudgeVerdict> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\btext\s+([abc])\b").expect("valid regex"));
    if let Some(c) = re.captures(output) {
        return Some(match c[1].to_ascii_uppercase().as_str() {
            "A" => JudgeVerdict::A,
            "B" => JudgeVerdict::B,
            _ => JudgeVerdict::C,
        });
    }
    output.to_lowercase().contains("tie").then_some(JudgeVerdict::Tie)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescQuality {
    pub rouge_l: f64,
    pub meteor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_preference: Option<JudgeVerdict>,
}

impl DescQuality {
    pub fn score(candidate: &str, reference: &str) -> Self {
        Self {
            rouge_l: rouge_l(candidate, reference),
            meteor: meteor_exact(candidate, reference),
            judge_preference: None,
        }
    }

    /// Scores a description against the simulator's full rendering of `obs`.
    pub fn against_ground_truth(candidate: &str, obs: &Observation) -> Self {
        Self::score(candidate, &obs.ground_truth_text())
    }

    pub fn with_judge(mut self, output: &str) -> Self {
        self.judge_preference = parse_judge_verdict(output);
        self
    }
}

// ---------------------------------------------------------------------------
// QA accuracy
// ---------------------------------------------------------------------------

/// One answered presence question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub family: String,
    /// `None` when the answer had no leading yes/no.
    pub predicted: Option<bool>,
    pub truth: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAccuracy {
    pub per_family: BTreeMap<String, Prf>,
    /// Unweighted mean of the per-family scores.
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    pub unparsed: usize,
}

/// Precision/recall/F1 with "entity present" as the positive class.
pub fn qa_accuracy(records: &[QaRecord]) -> QaAccuracy {
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    let mut unparsed = 0;
    for r in records {
        let Some(pred) = r.predicted else {
            unparsed += 1;
            continue;
        };
        let c = counts.entry(r.family.clone()).or_default();
        let slot = match (pred, r.truth) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[slot] += 1;
    }
    let per_family: BTreeMap<String, Prf> = counts
        .into_iter()
        .map(|(f, [tp, fp, fn_, tn])| (f, Prf::from_counts(tp, fp, fn_, tn)))
        .collect();
    let n = per_family.len().max(1) as f64;
    let avg = |g: fn(&Prf) -> f64| per_family.values().map(g).sum::<f64>() / n;
    QaAccuracy {
        avg_precision: avg(|p| p.precision),
        avg_recall: avg(|p| p.recall),
        avg_f1: avg(|p| p.f1),
        per_family,
        unparsed,
    }
}

/// Asks `n` presence questions about seeded household scenes, each about an
/// entity in view or an absent one with even odds, and records the answers.
/// Each query walks a few expert steps into its episode first so the views
/// vary.
pub fn probe_answers(
    perception: &dyn PerceptionModel,
    n: usize,
    seed: u64,
) -> Result<Vec<QaRecord>, BackendError> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let family = TaskFamily::ALL[i % TaskFamily::ALL.len()];
        let ep_seed = Split::Test.seed(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let task = TaskSpec::sample(family, ep_seed);
        let mut env = HouseholdEnv::new(HouseholdConfig::default());
        env.reset(&task, ep_seed);
        let mut rng = keyed_rng(seed, &["qa-probe", &i.to_string()]);
        for _ in 0..rng.gen_range(0..6) {
            let Some(a) = env.expert_action() else {
                break;
            };
            if env.step(&a).map(|o| o.done).unwrap_or(true) {
                break;
            }
        }
        let obs = env.observation();
        let Symbolic::Household(scene) = &obs.symbolic else {
            unreachable!("household observation")
        };
        let mut present: Vec<String> = scene.visible_objects().map(|o| o.name.clone()).collect();
        present.push(scene.location.name.clone());
        present.extend(scene.held.iter().map(|h| h.name.clone()));
        present.sort();
        present.dedup();
        let absent: Vec<&String> = scene.vocabulary.iter().filter(|v| !present.contains(v)).collect();
        let entity = if rng.gen_bool(0.5) || absent.is_empty() {
            present[rng.gen_range(0..present.len())].clone()
        } else {
            absent[rng.gen_range(0..absent.len())].clone()
        };
        let q = Question::new("question1", format!("{QUESTION_PREFIX} a {entity}?"));
        let truth = ground_truth_polarity(&q, &obs)?;
        let answer = perception.answer(&q, &obs)?;
        out.push(QaRecord {
            family: family.as_str().to_string(),
            predicted: answer_polarity(&answer),
            truth,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Call accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSummary {
    pub perception_calls: usize,
    pub reasoning_calls: usize,
    pub steps: usize,
    pub questions: usize,
    /// Questions per view-level transcript.
    pub mean_questions: f64,
    pub mean_questions_per_family: BTreeMap<String, f64>,
}

/// Sums transcript counters and checks each against the per-step identities
/// and the counts logged on the trajectory.
pub fn call_accounting(logs: &[EpisodeLog]) -> Result<CallSummary, EvalError> {
    let mut s = CallSummary {
        perception_calls: 0,
        reasoning_calls: 0,
        steps: 0,
        questions: 0,
        mean_questions: 0.0,
        mean_questions_per_family: BTreeMap::new(),
    };
    let mut transcripts = 0usize;
    let mut fam: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for log in logs {
        let traj = &log.trajectory;
        let bad = |step: usize, detail: String| EvalError::InconsistentTranscript {
            episode: traj.episode_id.clone(),
            step,
            detail,
        };
        if log.steps.len() != traj.transitions.len() {
            return Err(bad(
                log.steps.len(),
                format!("{} transcripts for {} transitions", log.steps.len(), traj.transitions.len()),
            ));
        }
        for (rec, tr) in log.steps.iter().zip(&traj.transitions) {
            let (mut p, mut r, mut q) = (0, 0, 0);
            for v in &rec.views {
                if !v.calls_consistent() {
                    let (ep, er) = v.expected_calls();
                    return Err(bad(
                        rec.step,
                        format!(
                            "logged ({}, {}) calls, expected ({ep}, {er})",
                            v.perception_calls, v.reasoning_calls
                        ),
                    ));
                }
                p += v.perception_calls;
                r += v.reasoning_calls;
                q += v.questions.len();
            }
            if (p, r, q) != (tr.calls.perception_calls, tr.calls.reasoning_calls, tr.calls.questions) {
                return Err(bad(rec.step, "transition counts disagree with transcripts".into()));
            }
            s.perception_calls += p;
            s.reasoning_calls += r;
            s.questions += q;
            s.steps += 1;
            transcripts += rec.views.len();
            let e = fam.entry(traj.family.clone()).or_default();
            e.0 += q;
            e.1 += rec.views.len();
        }
    }
    let mean = |q: usize, n: usize| if n == 0 { 0.0 } else { q as f64 / n as f64 };
    s.mean_questions = mean(s.questions, transcripts);
    s.mean_questions_per_family = fam.into_iter().map(|(f, (q, n))| (f, mean(q, n))).collect();
    Ok(s)
}

// ---------------------------------------------------------------------------
// Oracle questions
// ---------------------------------------------------------------------------

/// Fixed per-family question templates with `{object}` and `{target}` slots.
#[derive(Debug, Clone)]
pub struct OracleQuestions {
    by_family: BTreeMap<TaskFamily, Vec<Template>>,
}

impl Default for OracleQuestions {
    fn default() -> Self {
        Self::from_json(ORACLE_QUESTIONS_JSON).expect("bundled oracle questions parse")
    }
}

impl OracleQuestions {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let raw: BTreeMap<TaskFamily, Vec<String>> =
            serde_json::from_str(text).map_err(|e| EvalError::Fixture(e.to_string()))?;
        let mut by_family = BTreeMap::new();
        for f in TaskFamily::ALL {
            let qs = raw
                .get(&f)
                .filter(|qs| !qs.is_empty())
                .ok_or_else(|| EvalError::Fixture(format!("no questions for {f}")))?;
            let mut templates = Vec::new();
            for (i, q) in qs.iter().enumerate() {
                if !q.starts_with(QUESTION_PREFIX) {
                    return Err(EvalError::Fixture(format!("{f} question {i} does not start with {QUESTION_PREFIX:?}")));
                }
                let t = Template::parse(&format!("{f}-{i}"), q).map_err(|e| EvalError::Fixture(e.to_string()))?;
                if let Some(s) = t.slots().find(|s| !matches!(*s, "object" | "target")) {
                    return Err(EvalError::Fixture(format!("{f} question {i}: unknown slot {{{s}}}")));
                }
                templates.push(t);
            }
            by_family.insert(f, templates);
        }
        Ok(Self { by_family })
    }

    pub fn questions_for(&self, task: &TaskSpec) -> Vec<String> {
        let values = [
            ("object", task.object_name.as_str()),
            ("target", task.target_receptacle.as_str()),
        ];
        self.by_family[&task.family]
            .iter()
            .map(|t| {
                let used: Vec<(&str, &str)> = values
                    .iter()
                    .copied()
                    .filter(|(k, _)| t.slots().any(|s| s == *k))
                    .collect();
                t.render(&used).expect("slots validated")
            })
            .collect()
    }
}

/// Answers question-generation prompts with the fixture questions for the
/// goal's family and forwards everything else.
pub struct OracleQuestionReasoner<'a> {
    pub inner: &'a dyn ReasoningModel,
    pub questions: &'a OracleQuestions,
    pub templates: &'a PromptTemplates,
}

impl ReasoningModel for OracleQuestionReasoner<'_> {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let p = prompt.strip_suffix(RETRY_SUFFIX).unwrap_or(prompt);
        let Some(slots) = self.templates.question_generation.extract(p) else {
            return self.inner.complete(prompt);
        };
        let task = TaskSpec::from_goal(&slots["goal"])
            .ok_or_else(|| BackendError::UnrecognizedPrompt(format!("no household task in goal {:?}", slots["goal"])))?;
        let qs: serde_json::Map<String, serde_json::Value> = self
            .questions
            .questions_for(&task)
            .into_iter()
            .enumerate()
            .map(|(i, q)| (format!("question{}", i + 1), q.into()))
            .collect();
        Ok(serde_json::Value::Object(qs).to_string())
    }

    fn id(&self) -> &str {
        "oracle-questions"
    }
}

/// Descriptions from one backend, noise-free ground-truth answers.
pub struct GroundTruthAnswers<'a> {
    pub describe: &'a dyn PerceptionModel,
    truth: OraclePerception,
}

impl<'a> GroundTruthAnswers<'a> {
    pub fn new(describe: &'a dyn PerceptionModel) -> Self {
        Self {
            describe,
            truth: OraclePerception::new(ScriptedOracleConfig::default()).expect("zero noise is valid"),
        }
    }
}

impl PerceptionModel for GroundTruthAnswers<'_> {
    fn describe(&self, prompt: &str, obs: &Observation) -> Result<String, BackendError> {
        self.describe.describe(prompt, obs)
    }

    fn answer(&self, question: &Question, obs: &Observation) -> Result<String, BackendError> {
        self.truth.answer(question, obs)
    }

    fn id(&self) -> &str {
        "ground-truth-answers"
    }
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Architecture,
    Merge,
    OracleQa,
    PerceptionMode,
    QaBudget,
}

str_enum!(AblationSuite,
    AblationSuite::Architecture => "architecture",
    AblationSuite::Merge => "merge",
    AblationSuite::OracleQa => "oracle_qa",
    AblationSuite::PerceptionMode => "perception_mode",
    AblationSuite::QaBudget => "qa_budget",
);

impl AblationSuite {
    pub const ALL: [AblationSuite; 5] = [
        AblationSuite::Architecture,
        AblationSuite::Merge,
        AblationSuite::OracleQa,
        AblationSuite::PerceptionMode,
        AblationSuite::QaBudget,
    ];

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        s.parse().map_err(|_| EvalError::UnknownSuite(s.to_string()))
    }

    /// Arms in report order; the last one is the reference for paired
    /// comparisons.
    pub fn arms(self) -> Vec<Arm> {
        let interactive = |merge, budget| DqaConfig {
            merge_strategy: merge,
            question_budget: budget,
            perception_mode: PerceptionMode::Interactive,
        };
        let mode = |m| DqaConfig {
            perception_mode: m,
            ..DqaConfig::default()
        };
        let arm = |name: &str, dqa| Arm::new(name, dqa);
        match self {
            AblationSuite::Architecture => vec![
                arm("raw_perception", mode(PerceptionMode::Raw)),
                arm("prism", mode(PerceptionMode::Interactive)),
            ],
            AblationSuite::Merge => vec![
                arm("concat", interactive(MergeStrategy::Concat, None)),
                arm("qa_only", interactive(MergeStrategy::QaOnly, None)),
                arm("llm_merge", interactive(MergeStrategy::LlmMerge, None)),
            ],
            AblationSuite::OracleQa => vec![
                Arm {
                    questions: QuestionSource::Fixture,
                    ..arm("oracle_q", mode(PerceptionMode::Interactive))
                },
                Arm {
                    questions: QuestionSource::Fixture,
                    answers: AnswerSource::GroundTruth,
                    ..arm("oracle_qa", mode(PerceptionMode::Interactive))
                },
                arm("prism", mode(PerceptionMode::Interactive)),
            ],
            AblationSuite::PerceptionMode => vec![
                arm("raw", mode(PerceptionMode::Raw)),
                arm("goal_aware", mode(PerceptionMode::GoalAware)),
                arm("interactive", mode(PerceptionMode::Interactive)),
            ],
            AblationSuite::QaBudget => vec![
                arm("budget_1", interactive(MergeStrategy::LlmMerge, Some(1))),
                arm("budget_3", interactive(MergeStrategy::LlmMerge, Some(3))),
                arm("unbudgeted", interactive(MergeStrategy::LlmMerge, None)),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSource {
    Generated,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Backend,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub dqa: DqaConfig,
    pub questions: QuestionSource,
    pub answers: AnswerSource,
}

impl Arm {
    fn new(name: &str, dqa: DqaConfig) -> Self {
        Self {
            name: name.to_string(),
            dqa,
            questions: QuestionSource::Generated,
            answers: AnswerSource::Backend,
        }
    }
}

/// Shared backends and settings for every arm of a suite.
#[derive(Clone, Copy)]
pub struct AblationSetup<'a> {
    pub perception: &'a dyn PerceptionModel,
    pub reasoning: &'a dyn ReasoningModel,
    pub templates: &'a PromptTemplates,
    pub oracle_questions: &'a OracleQuestions,
    /// Everything but `dqa`, which each arm sets.
    pub agent: AgentConfig,
    pub bootstrap_seed: u64,
    pub exec: Exec,
}

/// One report line: an arm on one family, or on all of them (`avg`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub suite: String,
    pub arm: String,
    pub family: String,
    pub episodes: usize,
    pub successes: usize,
    pub sr: f64,
    pub sr_ci_low: f64,
    pub sr_ci_high: f64,
    /// Questions per view per step.
    pub mean_questions: f64,
    /// Whitespace-token proxy for the final description length.
    pub mean_d_f_tokens: f64,
    /// Paired against the reference arm on the same seeds.
    pub wins: usize,
    pub losses: usize,
    pub sign_test_p: f64,
}

pub const AVG_FAMILY: &str = "avg";

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub arms: Vec<Arm>,
    pub reference_arm: String,
    pub families: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Episode logs per arm, in task order.
    pub logs: Vec<(String, Vec<EpisodeLog>)>,
}

impl AblationReport {
    pub fn row(&self, arm: &str, family: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm && r.family == family)
    }

    /// Mean success rate of an arm over all its episodes.
    pub fn sr(&self, arm: &str) -> Option<f64> {
        self.row(arm, AVG_FAMILY).map(|r| r.sr)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Success rates per family, then per-arm summary statistics.
    pub fn to_markdown(&self) -> String {
        let pct = |x: f64| format!("{:.1}%", 100.0 * x);
        let mut out = format!("## Ablation: {}\n\n| Arm |", self.suite);
        for f in &self.families {
            out.push_str(&format!(" {f} |"));
        }
        out.push_str(" Avg |\n|---|");
        out.push_str(&"---|".repeat(self.families.len() + 1));
        out.push('\n');
        for arm in &self.arms {
            out.push_str(&format!("| {} |", arm.name));
            for f in self.families.iter().map(String::as_str).chain([AVG_FAMILY]) {
                let cell = self.row(&arm.name, f).map(|r| pct(r.sr)).unwrap_or_default();
                out.push_str(&format!(" {cell} |"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\n| Arm | Episodes | SR | 95% bootstrap CI | Questions/step | d_f length (whitespace tokens) | W/L vs {} | Sign test p |\n|---|---|---|---|---|---|---|---|\n",
            self.reference_arm
        ));
        for arm in &self.arms {
            if let Some(r) = self.row(&arm.name, AVG_FAMILY) {
                out.push_str(&format!(
                    "| {} | {} | {} | [{}, {}] | {:.2} | {:.1} | {}/{} | {:.4} |\n",
                    r.arm,
                    r.episodes,
                    pct(r.sr),
                    pct(r.sr_ci_low),
                    pct(r.sr_ci_high),
                    r.mean_questions,
                    r.mean_d_f_tokens,
                    r.wins,
                    r.losses,
                    r.sign_test_p
                ));
            }
        }
        out
    }
}

/// Percentile bootstrap 95% interval for a success rate.
pub fn bootstrap_ci(outcomes: &[bool], seed: u64, key: &str) -> (f64, f64) {
    let n = outcomes.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut rng = keyed_rng(seed, &["bootstrap", key]);
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).filter(|_| outcomes[rng.gen_range(0..n)]).count() as f64 / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (BOOTSTRAP_RESAMPLES - 1) as f64).round()) as usize];
    (at(0.025), at(0.975))
}

/// Two-sided exact sign test on discordant pairs.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * b.cdf(wins.min(losses) as u64)).min(1.0)
}

struct Outcome {
    family: String,
    success: bool,
    questions: usize,
    views: usize,
    d_f_tokens: usize,
    steps: usize,
}

fn outcome(log: &EpisodeLog) -> Outcome {
    let t = &log.trajectory;
    Outcome {
        family: t.family.clone(),
        success: t.success,
        questions: t.transitions.iter().map(|s| s.calls.questions).sum(),
        views: log.steps.iter().map(|s| s.views.len()).sum(),
        d_f_tokens: t.transitions.iter().map(|s| token_proxy_len(&s.d_f)).sum(),
        steps: t.transitions.len(),
    }
}

/// Runs every arm of `suite` on the same `(task, seed)` list.
pub fn run_ablation<E, F>(
    suite: AblationSuite,
    setup: &AblationSetup<'_>,
    make_env: F,
    tasks: &[(E::Task, u64)],
    actor: &Actor<'_>,
) -> Result<AblationReport, EvalError>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    if tasks.is_empty() {
        return Err(EvalError::Empty);
    }
    let arms = suite.arms();
    let fixture_reasoner = OracleQuestionReasoner {
        inner: setup.reasoning,
        questions: setup.oracle_questions,
        templates: setup.templates,
    };
    let truthful = GroundTruthAnswers::new(setup.perception);
    let mut logs = Vec::new();
    for arm in &arms {
        let reasoning: &dyn ReasoningModel = match arm.questions {
            QuestionSource::Generated => setup.reasoning,
            QuestionSource::Fixture => &fixture_reasoner,
        };
        let perception: &dyn PerceptionModel = match arm.answers {
            AnswerSource::Backend => setup.perception,
            AnswerSource::GroundTruth => &truthful,
        };
        let cfg = AgentConfig {
            dqa: arm.dqa,
            ..setup.agent
        };
        tracing::info!(suite = %suite, arm = %arm.name, episodes = tasks.len(), "running arm");
        let agent = Agent::new(perception, reasoning, setup.templates, cfg);
        let arm_logs = run_batch(agent, &make_env, tasks, actor, setup.exec)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        logs.push((arm.name.clone(), arm_logs));
    }

    let mut families: Vec<String> = Vec::new();
    for (_, l) in logs.iter().take(1) {
        for log in l {
            if !families.contains(&log.trajectory.family) {
                families.push(log.trajectory.family.clone());
            }
        }
    }
    let reference_arm = arms.last().expect("suites have arms").name.clone();
    let outcomes: Vec<Vec<Outcome>> = logs.iter().map(|(_, l)| l.iter().map(outcome).collect()).collect();
    let reference = outcomes.last().expect("suites have arms");
    let mut rows = Vec::new();
    for (arm, arm_out) in arms.iter().zip(&outcomes) {
        let groups = families
            .iter()
            .map(|f| (f.as_str(), Some(f.as_str())))
            .chain([(AVG_FAMILY, None)]);
        for (label, filter) in groups {
            let idx: Vec<usize> = (0..arm_out.len())
                .filter(|&i| filter.is_none_or(|f| arm_out[i].family == f))
                .collect();
            let succ: Vec<bool> = idx.iter().map(|&i| arm_out[i].success).collect();
            let wins = idx.iter().filter(|&&i| arm_out[i].success && !reference[i].success).count();
            let losses = idx.iter().filter(|&&i| !arm_out[i].success && reference[i].success).count();
            let views: usize = idx.iter().map(|&i| arm_out[i].views).sum();
            let steps: usize = idx.iter().map(|&i| arm_out[i].steps).sum();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let successes = succ.iter().filter(|s| **s).count();
            let (lo, hi) = bootstrap_ci(&succ, setup.bootstrap_seed, &format!("{}/{}", arm.name, label));
            rows.push(ReportRow {
                suite: suite.to_string(),
                arm: arm.name.clone(),
                family: label.to_string(),
                episodes: idx.len(),
                successes,
                sr: ratio(successes, idx.len()),
                sr_ci_low: lo,
                sr_ci_high: hi,
                mean_questions: ratio(idx.iter().map(|&i| arm_out[i].questions).sum(), views),
                mean_d_f_tokens: ratio(idx.iter().map(|&i| arm_out[i].d_f_tokens).sum(), steps),
                wins,
                losses,
                sign_test_p: sign_test(wins, losses),
            });
        }
    }
    Ok(AblationReport {
        suite,
        arms,
        reference_arm,
        families,
        rows,
        logs,
    })
}
