//! The interactive perception loop: describe, ask, answer, merge.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, PerceptionModel, ReasoningModel, QUESTION_PREFIX};
use crate::exec::Exec;
use crate::templates::{render_qa_list, PromptTemplates, TemplateError, RETRY_SUFFIX};
use crate::types::{Description, DescriptionKind, Goal, Observation, QaPair, Question, QuestionSet};

const ALL_INFO: &str = "I have all the information";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    #[default]
    LlmMerge,
    Concat,
    QaOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionMode {
    #[default]
    Interactive,
    Raw,
    GoalAware,
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:literal),+ $(,)?) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim().to_lowercase().replace('-', "_").as_str() {
                    $($s => Ok($v),)+
                    other => Err(format!(
                        "unknown value `{other}`; expected one of: {}",
                        [$($s),+].join(", ")
                    )),
                }
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(MergeStrategy,
    MergeStrategy::LlmMerge => "llm_merge",
    MergeStrategy::Concat => "concat",
    MergeStrategy::QaOnly => "qa_only",
);

str_enum!(PerceptionMode,
    PerceptionMode::Interactive => "interactive",
    PerceptionMode::Raw => "raw",
    PerceptionMode::GoalAware => "goal_aware",
);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqaConfig {
    pub merge_strategy: MergeStrategy,
    /// Keep at most this many questions; `None` lets the model decide.
    pub question_budget: Option<usize>,
    pub perception_mode: PerceptionMode,
}

impl DqaConfig {
    pub fn validate(&self) -> Result<(), DqaError> {
        if self.question_budget == Some(0) {
            return Err(DqaError::Config("question_budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DqaError {
    #[error("{stage} failed: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("answering `{question}` failed: {source}")]
    Answer {
        question: String,
        #[source]
        source: BackendError,
    },
    #[error("could not parse questions after a reformat retry; last output: {raw:?}")]
    QuestionParse { raw: String },
    #[error("{0} produced an empty description")]
    EmptyOutput(&'static str),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid perception config: {0}")]
    Config(String),
}

impl DqaError {
    pub fn backend(&self) -> Option<&BackendError> {
        match self {
            DqaError::Backend { source, .. } | DqaError::Answer { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Everything that happened while perceiving one view at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTranscript {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    pub mode: PerceptionMode,
    pub merge_strategy: MergeStrategy,
    pub d_i: Description,
    pub questions: QuestionSet,
    pub qa: Vec<QaPair>,
    pub d_f: Description,
    pub perception_calls: usize,
    pub reasoning_calls: usize,
    /// Reformat retries spent on question parsing.
    pub retries: usize,
    pub short_circuit: bool,
}

impl StepTranscript {
    /// Call counts implied by the pipeline structure.
    pub fn expected_calls(&self) -> (usize, usize) {
        match self.mode {
            PerceptionMode::Raw | PerceptionMode::GoalAware => (1, 0),
            PerceptionMode::Interactive => {
                let n = self.questions.len();
                let merge = usize::from(n > 0 && self.merge_strategy == MergeStrategy::LlmMerge);
                (1 + n, 1 + self.retries + merge)
            }
        }
    }

    pub fn calls_consistent(&self) -> bool {
        self.expected_calls() == (self.perception_calls, self.reasoning_calls)
            && self.qa.len() == self.questions.len()
            && self.d_f.kind == DescriptionKind::Final
    }
}

fn backend(stage: &'static str) -> impl FnOnce(BackendError) -> DqaError {
    move |source| DqaError::Backend { stage, source }
}

fn describe_as(
    vp: &dyn PerceptionModel,
    prompt: &str,
    obs: &Observation,
    kind: DescriptionKind,
    stage: &'static str,
) -> Result<Description, DqaError> {
    let text = vp.describe(prompt, obs).map_err(backend(stage))?;
    Description::new(text.trim(), kind, vp.id()).map_err(|_| DqaError::EmptyOutput(stage))
}

/// Goal-agnostic description with the constant prompt. One perception call.
pub fn initial_description(
    vp: &dyn PerceptionModel,
    templates: &PromptTemplates,
    obs: &Observation,
) -> Result<Description, DqaError> {
    describe_as(vp, &templates.initial_prompt(), obs, DescriptionKind::Initial, "initial description")
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let t = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")).unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

fn key_ordinal(k: &str) -> u64 {
    let digits: String = k.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().unwrap_or(u64::MAX)
}

/// Parses raw model output. `None` means unparseable.
pub fn parse_questions(raw: &str) -> Option<QuestionSet> {
    if raw.contains(ALL_INFO) {
        return Some(Vec::new());
    }
    let body = strip_fences(raw);
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    if end < start {
        return None;
    }
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&body[start..=end]).ok()?;
    let mut qs = Vec::with_capacity(map.len());
    for (k, v) in map {
        let text = v.as_str()?.trim().to_string();
        qs.push(Question::new(k, text));
    }
    qs.sort_by(|a, b| key_ordinal(&a.key).cmp(&key_ordinal(&b.key)).then(a.key.cmp(&b.key)));
    qs.retain(|q| q.text.starts_with(QUESTION_PREFIX));
    Some(qs)
}

/// Generated questions plus the number of reasoning calls spent.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuestions {
    pub questions: QuestionSet,
    pub reasoning_calls: usize,
    pub retries: usize,
    pub short_circuit: bool,
}

/// Asks the reasoning model what is missing from `d_i` for `goal`.
pub fn generate_questions(
    r: &dyn ReasoningModel,
    templates: &PromptTemplates,
    d_i: &Description,
    goal: &Goal,
    budget: Option<usize>,
) -> Result<GeneratedQuestions, DqaError> {
    let prompt = templates.render_question_generation(&d_i.text, goal.as_str())?;
    let mut raw = r.complete(&prompt).map_err(backend("question generation"))?;
    let mut calls = 1;
    let mut parsed = parse_questions(&raw);
    if parsed.is_none() {
        raw = r
            .complete(&format!("{prompt}{RETRY_SUFFIX}"))
            .map_err(backend("question generation retry"))?;
        calls += 1;
        parsed = parse_questions(&raw);
    }
    let mut questions = parsed.ok_or(DqaError::QuestionParse { raw: raw.clone() })?;
    if let Some(b) = budget {
        questions.truncate(b);
    }
    Ok(GeneratedQuestions {
        short_circuit: raw.contains(ALL_INFO),
        questions,
        reasoning_calls: calls,
        retries: calls - 1,
    })
}

/// One perception call per question, answers paired in question order.
pub fn answer_questions(
    vp: &dyn PerceptionModel,
    qs: &[Question],
    obs: &Observation,
    fan_out: Exec,
) -> Result<Vec<QaPair>, DqaError> {
    fan_out
        .map(qs, |q| {
            vp.answer(q, obs)
                .map(|a| QaPair::new(q.clone(), a.trim()))
                .map_err(|source| DqaError::Answer {
                    question: q.text.clone(),
                    source,
                })
        })
        .into_iter()
        .collect()
}

/// Final description from `d_i` and the answers. Returns the description and
/// the number of reasoning calls made.
pub fn merge(
    r: &dyn ReasoningModel,
    templates: &PromptTemplates,
    d_i: &Description,
    qa: &[QaPair],
    strategy: MergeStrategy,
) -> Result<(Description, usize), DqaError> {
    let fin = |text: String, source: &str| {
        Description::new(text, DescriptionKind::Final, source).map_err(|_| DqaError::EmptyOutput("merge"))
    };
    match strategy {
        MergeStrategy::LlmMerge => {
            let prompt = templates.render_refinement(&d_i.text, qa)?;
            let text = r.complete(&prompt).map_err(backend("merge"))?;
            Ok((fin(text.trim().to_string(), r.id())?, 1))
        }
        MergeStrategy::Concat => Ok((
            fin(format!("{}\nQA: {}", d_i.text, render_qa_list(qa)), "concat")?,
            0,
        )),
        MergeStrategy::QaOnly if qa.is_empty() => Ok((d_i.clone().into_final("qa_only"), 0)),
        MergeStrategy::QaOnly => Ok((fin(format!("QA: {}", render_qa_list(qa)), "qa_only")?, 0)),
    }
}

/// The perception phase of one step for one view.
pub fn perceive(
    vp: &dyn PerceptionModel,
    r: &dyn ReasoningModel,
    templates: &PromptTemplates,
    obs: &Observation,
    goal: &Goal,
    cfg: &DqaConfig,
    fan_out: Exec,
) -> Result<(Description, StepTranscript), DqaError> {
    let single = |d_i: Description| {
        let d_f = d_i.clone().into_final(d_i.source.clone());
        let t = StepTranscript {
            view: None,
            mode: cfg.perception_mode,
            merge_strategy: cfg.merge_strategy,
            d_i,
            questions: vec![],
            qa: vec![],
            d_f: d_f.clone(),
            perception_calls: 1,
            reasoning_calls: 0,
            retries: 0,
            short_circuit: false,
        };
        (d_f, t)
    };
    match cfg.perception_mode {
        PerceptionMode::Raw => {
            let d = describe_as(vp, &templates.initial_prompt(), obs, DescriptionKind::Raw, "raw description")?;
            Ok(single(d))
        }
        PerceptionMode::GoalAware => {
            let prompt = templates.render_goal_aware(goal.as_str())?;
            let d = describe_as(vp, &prompt, obs, DescriptionKind::GoalAware, "goal-aware description")?;
            Ok(single(d))
        }
        PerceptionMode::Interactive => {
            let d_i = initial_description(vp, templates, obs)?;
            let gen = generate_questions(r, templates, &d_i, goal, cfg.question_budget)?;
            let (d_f, qa, merge_calls) = if gen.questions.is_empty() {
                (d_i.clone().into_final(d_i.source.clone()), vec![], 0)
            } else {
                let qa = answer_questions(vp, &gen.questions, obs, fan_out)?;
                let (d_f, calls) = merge(r, templates, &d_i, &qa, cfg.merge_strategy)?;
                (d_f, qa, calls)
            };
            let t = StepTranscript {
                view: None,
                mode: cfg.perception_mode,
                merge_strategy: cfg.merge_strategy,
                perception_calls: 1 + qa.len(),
                reasoning_calls: gen.reasoning_calls + merge_calls,
                retries: gen.retries,
                short_circuit: gen.short_circuit,
                d_i,
                questions: gen.questions,
                qa,
                d_f: d_f.clone(),
            };
            Ok((d_f, t))
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::{MockBackend, OraclePerception, ScriptedOracleConfig};
    use crate::env::household::toilet_scene;
    use crate::types::Symbolic;

    fn obs() -> Observation {
        let s = toilet_scene();
        Observation::new("ep", 0, Symbolic::Household(s.local_scene(Arc::new(s.vocabulary()))))
    }

    fn goal() -> Goal {
        Goal::new("heat some egg and put it in diningtable").unwrap()
    }

    fn d(text: &str) -> Description {
        Description::new(text, DescriptionKind::Initial, "t").unwrap()
    }

    #[test]
    fn initial_description_passthrough() {
        let vp = MockBackend::new(["a table with an apple"]);
        let t = PromptTemplates::default();
        let got = initial_description(&vp, &t, &obs()).unwrap();
        assert_eq!(got.text, "a table with an apple");
        assert_eq!(got.kind, DescriptionKind::Initial);
        assert_eq!(vp.calls(), 1);
    }

    #[test]
    fn oracle_initial_mentions_visible_object() {
        let vp = OraclePerception::new(ScriptedOracleConfig::default()).unwrap();
        let got = initial_description(&vp, &PromptTemplates::default(), &obs()).unwrap();
        assert!(got.text.contains("spraybottle"));
    }

    #[test]
    fn parses_questions_in_key_order() {
        let raw = r#"{"question1": "Do you see a stove or heating source?", "question2": "Do you see an egg?"}"#;
        let qs = parse_questions(raw).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].text, "Do you see a stove or heating source?");
        let wrapped = format!("Sure! Here you go:\n```json\n{raw}\n```\nHope this helps.");
        assert_eq!(parse_questions(&wrapped).unwrap(), qs);
        let many: String = format!(
            "{{{}}}",
            (1..=11).map(|i| format!("\"question{i}\": \"Do you see x{i}?\"")).collect::<Vec<_>>().join(", ")
        );
        let qs = parse_questions(&many).unwrap();
        assert_eq!(qs[1].key, "question2");
        assert_eq!(qs[10].key, "question11");
        assert_eq!(parse_questions("I have all the information.").unwrap(), vec![]);
        assert!(parse_questions("no idea").is_none());
    }

    #[test]
    fn invalid_prefix_questions_are_dropped() {
        let qs = parse_questions(r#"{"question1": "Is there an egg?", "question2": "Do you see an egg?"}"#).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].key, "question2");
    }

    #[test]
    fn budget_truncates_in_key_order() {
        let r = MockBackend::new([r#"{"question1": "Do you see a?", "question2": "Do you see b?", "question3": "Do you see c?", "question4": "Do you see d?"}"#]);
        let g = generate_questions(&r, &PromptTemplates::default(), &d("x"), &goal(), Some(1)).unwrap();
        assert_eq!(g.questions.len(), 1);
        assert_eq!(g.questions[0].key, "question1");
    }

    #[test]
    fn retry_once_then_fail() {
        let t = PromptTemplates::default();
        let r = MockBackend::new(["garbage", r#"{"question1": "Do you see an egg?"}"#]);
        let g = generate_questions(&r, &t, &d("x"), &goal(), None).unwrap();
        assert_eq!((g.questions.len(), g.reasoning_calls, g.retries), (1, 2, 1));
        let r = MockBackend::new(["garbage", "still garbage"]);
        assert!(matches!(
            generate_questions(&r, &t, &d("x"), &goal(), None),
            Err(DqaError::QuestionParse { .. })
        ));
    }

    #[test]
    fn answers_in_question_order() {
        let vp = MockBackend::new(["A1", "A2", "A3"]);
        let qs: Vec<Question> = (1..=3).map(|i| Question::new(format!("question{i}"), "Do you see x?")).collect();
        let qa = answer_questions(&vp, &qs, &obs(), Exec::Sequential).unwrap();
        assert_eq!(qa.iter().map(|p| p.answer.as_str()).collect::<Vec<_>>(), ["A1", "A2", "A3"]);
        assert_eq!(vp.calls(), 3);
        assert!(answer_questions(&vp, &[], &obs(), Exec::Sequential).unwrap().is_empty());
        assert_eq!(vp.calls(), 3);
    }

    #[test]
    fn concat_and_qa_only_renderings() {
        let r = MockBackend::new(Vec::<String>::new());
        let t = PromptTemplates::default();
        let qa = vec![QaPair::new(Question::new("question1", "Do you see an egg?"), "Yes...")];
        let (c, calls) = merge(&r, &t, &d("a table"), &qa, MergeStrategy::Concat).unwrap();
        assert_eq!(c.text, "a table\nQA: [('Do you see an egg?', 'Yes...')]");
        assert_eq!((c.kind, calls), (DescriptionKind::Final, 0));
        let (q, _) = merge(&r, &t, &d("a table"), &qa, MergeStrategy::QaOnly).unwrap();
        assert!(!q.text.contains("a table"));
        let (q, _) = merge(&r, &t, &d("a table"), &[], MergeStrategy::QaOnly).unwrap();
        assert_eq!(q.text, "a table");
        assert_eq!(r.calls(), 0);
    }

    #[test]
    fn interactive_call_accounting() {
        let vp = MockBackend::new(["d_i", "ans1", "ans2"]);
        let r = MockBackend::new([
            r#"{"question1": "Do you see an egg?", "question2": "Do you see a microwave?"}"#,
            "merged",
        ]);
        let (d_f, t) = perceive(&vp, &r, &PromptTemplates::default(), &obs(), &goal(), &DqaConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(d_f.text, "merged");
        assert_eq!((t.perception_calls, t.reasoning_calls), (3, 2));
        assert!(t.calls_consistent());
    }

    #[test]
    fn short_circuit_keeps_d_i() {
        let vp = MockBackend::new(["the scene"]);
        let r = MockBackend::new(["I have all the information."]);
        let (d_f, t) = perceive(&vp, &r, &PromptTemplates::default(), &obs(), &goal(), &DqaConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(d_f.text, "the scene");
        assert_eq!(d_f.kind, DescriptionKind::Final);
        assert_eq!((t.perception_calls, t.reasoning_calls), (1, 1));
        assert!(t.short_circuit && t.calls_consistent());
    }

    #[test]
    fn raw_and_goal_aware_modes() {
        for mode in [PerceptionMode::Raw, PerceptionMode::GoalAware] {
            let vp = MockBackend::new(["only"]);
            let r = MockBackend::new(Vec::<String>::new());
            let cfg = DqaConfig { perception_mode: mode, ..Default::default() };
            let (d_f, t) = perceive(&vp, &r, &PromptTemplates::default(), &obs(), &goal(), &cfg, Exec::Sequential).unwrap();
            assert_eq!(d_f.text, "only");
            assert_eq!((t.perception_calls, t.reasoning_calls), (1, 0));
            assert!(t.calls_consistent());
        }
    }

    #[test]
    fn enum_parsing() {
        assert_eq!("llm-merge".parse::<MergeStrategy>().unwrap(), MergeStrategy::LlmMerge);
        assert_eq!("goal_aware".parse::<PerceptionMode>().unwrap(), PerceptionMode::GoalAware);
        assert!("fancy".parse::<MergeStrategy>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn budget_is_respected(n in 0usize..12, budget in 1usize..5) {
            let raw = format!(
                "{{{}}}",
                (1..=n).map(|i| format!("\"question{i}\": \"Do you see x{i}?\"")).collect::<Vec<_>>().join(", ")
            );
            let r = MockBackend::new([raw]);
            let g = generate_questions(&r, &PromptTemplates::default(), &d("x"), &goal(), Some(budget)).unwrap();
            proptest::prop_assert!(g.questions.len() <= budget);
            proptest::prop_assert!(g.questions.iter().all(|q| q.text.starts_with("Do you see")));
        }
    }
}
