//! Ground-truth backed perception and a rule-based reasoner.
//!
//! Omission and hallucination are keyed by the view, so a view is described
//! the same way every time it is seen. Answer errors are keyed by the step as
//! well, so asking again later can give a different answer.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, PerceptionModel, ReasoningModel};
use crate::env::household::{render_list, LocalScene};
use crate::env::nav::{with_article, NavView};
use crate::templates::{parse_qa_list, PromptTemplates, RETRY_SUFFIX};
use crate::types::{Observation, Question, Symbolic};
use crate::util::{article, keyed_unit};

pub const QUESTION_PREFIX: &str = "Do you see";
const ALL_INFO: &str = "I have all the information.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedOracleConfig {
    pub answer_error_rate: f64,
    pub raw_omission_rate: f64,
    pub hallucination_rate: f64,
    pub rng_seed: u64,
}

impl Default for ScriptedOracleConfig {
    fn default() -> Self {
        Self {
            answer_error_rate: 0.0,
            raw_omission_rate: 0.0,
            hallucination_rate: 0.0,
            rng_seed: 0,
        }
    }
}

impl ScriptedOracleConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        for (name, p) in [
            ("answer_error_rate", self.answer_error_rate),
            ("raw_omission_rate", self.raw_omission_rate),
            ("hallucination_rate", self.hallucination_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Whole-word, case-insensitive occurrence of `entity` in `text`.
pub fn entity_in(text: &str, entity: &str) -> bool {
    find_entity(&text.to_lowercase(), &entity.to_lowercase()).is_some()
}

fn find_entity(text: &str, entity: &str) -> Option<usize> {
    if entity.is_empty() {
        return None;
    }
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(off) = text[from..].find(entity) {
        let start = from + off;
        let end = start + entity.len();
        let before = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let after = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if before && after {
            return Some(start);
        }
        from = start + 1;
    }
    None
}

/// Longest vocabulary entry occurring in `text`.
fn longest_match<'a>(text: &str, vocab: &'a [String]) -> Option<&'a str> {
    let lower = text.to_lowercase();
    vocab
        .iter()
        .filter(|v| find_entity(&lower, &v.to_lowercase()).is_some())
        .max_by(|a, b| a.len().cmp(&b.len()).then(b.cmp(a)))
        .map(String::as_str)
}

/// Vocabulary entries in `text`, in order of first occurrence. Longer
/// entries win where matches overlap.
fn entities_by_position(text: &str, vocab: &[String]) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut sorted: Vec<&String> = vocab.iter().collect();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    for v in sorted {
        if let Some(s) = find_entity(&lower, &v.to_lowercase()) {
            let e = s + v.len();
            if !spans.iter().any(|(a, b, _)| s < *b && *a < e) {
                spans.push((s, e, v.clone()));
            }
        }
    }
    spans.sort();
    spans.into_iter().map(|(_, _, v)| v).collect()
}

/// The queried phrase with articles and trailing punctuation stripped.
fn raw_entity(question: &str) -> String {
    let mut s = question.trim();
    s = s.strip_prefix(QUESTION_PREFIX).unwrap_or(s).trim();
    s = s.trim_end_matches(['?', '.', ' ']);
    s = s.strip_suffix(" in the image").unwrap_or(s);
    for art in ["a ", "an ", "any ", "the ", "some "] {
        if let Some(rest) = s.strip_prefix(art) {
            s = rest;
            break;
        }
    }
    s.trim().to_string()
}

/// Leading yes/no of an answer; `None` if neither.
pub fn answer_polarity(answer: &str) -> Option<bool> {
    let lower = answer.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    let first: String = lower.chars().take_while(|c| c.is_alphanumeric()).collect();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn household_truth(scene: &LocalScene, x: &str) -> Option<String> {
    if let Some(h) = scene.held.as_ref().filter(|h| h.name == x) {
        return Some(format!("Yes, you are holding a {}.", h.entity()));
    }
    if scene.location.name == x {
        return Some(format!("Yes, you are at the {}.", scene.label()));
    }
    scene
        .visible_objects()
        .filter(|o| o.name == x)
        .min_by_key(|o| o.id)
        .map(|o| {
            format!(
                "Yes, there is a {} {} the {}.",
                o.entity(),
                scene.location.kind.preposition().to_lowercase(),
                scene.label()
            )
        })
}

fn nav_truth(view: &NavView, x: &str) -> Option<String> {
    view.landmarks
        .iter()
        .any(|l| l == x)
        .then(|| format!("Yes, there is {} in this view.", with_article(x)))
}

/// Whether the entity a question asks about is present, from ground truth.
/// Unknown entities count as absent.
pub fn ground_truth_polarity(question: &Question, obs: &Observation) -> Result<bool, BackendError> {
    check_prefix(question)?;
    Ok(match &obs.symbolic {
        Symbolic::Household(scene) => longest_match(&question.text, &scene.vocabulary)
            .is_some_and(|x| household_truth(scene, x).is_some()),
        Symbolic::Nav(view) => longest_match(&question.text, &view.vocabulary)
            .is_some_and(|x| nav_truth(view, x).is_some()),
    })
}

fn check_prefix(q: &Question) -> Result<(), BackendError> {
    if q.text.trim_start().starts_with(QUESTION_PREFIX) {
        Ok(())
    } else {
        Err(BackendError::QuestionFormat(q.text.clone()))
    }
}

/// Perception backed by the observation's ground truth, with seeded noise.
#[derive(Debug, Clone)]
pub struct OraclePerception {
    cfg: ScriptedOracleConfig,
    templates: PromptTemplates,
}

impl OraclePerception {
    pub fn new(cfg: ScriptedOracleConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            templates: PromptTemplates::default(),
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &ScriptedOracleConfig {
        &self.cfg
    }

    fn unit(&self, parts: &[&str]) -> f64 {
        keyed_unit(self.cfg.rng_seed, parts)
    }

    fn goal_entity(&self, prompt: &str, vocab: &[String]) -> Option<String> {
        let goal = self.templates.goal_aware.extract(prompt)?.remove("goal")?;
        entities_by_position(&goal, vocab).into_iter().next()
    }
}

impl PerceptionModel for OraclePerception {
    fn describe(&self, prompt: &str, obs: &Observation) -> Result<String, BackendError> {
        let ep = obs.episode_id.as_str();
        let omit = self.cfg.raw_omission_rate;
        Ok(match &obs.symbolic {
            Symbolic::Household(scene) => {
                let key = scene.view_key();
                let mut extra = Vec::new();
                if let Some(x) = self.goal_entity(prompt, &scene.vocabulary) {
                    if household_truth(scene, &x).is_none()
                        && self.unit(&["hallucinate", ep, &key, &x]) < self.cfg.hallucination_rate
                    {
                        extra.push(format!("a {x} 1"));
                    }
                }
                scene.render_view(
                    |o| self.unit(&["omit", ep, &key, &o.entity().to_string()]) >= omit,
                    &extra,
                )
            }
            Symbolic::Nav(view) => {
                let key = view.view_key();
                let mut extra = Vec::new();
                if let Some(x) = self.goal_entity(prompt, &view.vocabulary) {
                    if nav_truth(view, &x).is_none()
                        && self.unit(&["hallucinate", ep, &key, &x]) < self.cfg.hallucination_rate
                    {
                        extra.push(with_article(&x));
                    }
                }
                view.render_view(|l| self.unit(&["omit", ep, &key, l]) >= omit, &extra)
            }
        })
    }

    fn answer(&self, question: &Question, obs: &Observation) -> Result<String, BackendError> {
        check_prefix(question)?;
        let (vocab, key): (&[String], String) = match &obs.symbolic {
            Symbolic::Household(s) => (&s.vocabulary, s.view_key()),
            Symbolic::Nav(v) => (&v.vocabulary, v.view_key()),
        };
        let Some(x) = longest_match(&question.text, vocab).map(str::to_string) else {
            let raw = raw_entity(&question.text);
            return Ok(format!("No, I do not see a {raw}."));
        };
        let (truth, false_yes, no) = match &obs.symbolic {
            Symbolic::Household(scene) => (
                household_truth(scene, &x),
                format!(
                    "Yes, there is a {x} 1 {} the {}.",
                    scene.location.kind.preposition().to_lowercase(),
                    scene.label()
                ),
                format!("No, I do not see a {x}."),
            ),
            Symbolic::Nav(view) => (
                nav_truth(view, &x),
                format!("Yes, there is {} in this view.", with_article(&x)),
                format!("No, I do not see {}.", with_article(&x)),
            ),
        };
        let step = obs.step.to_string();
        let flip = self.unit(&["answer", &obs.episode_id, &step, &key, &x]) < self.cfg.answer_error_rate;
        Ok(match (truth, flip) {
            (Some(yes), false) => yes,
            (Some(_), true) => no,
            (None, false) => no,
            (None, true) => false_yes,
        })
    }

    fn id(&self) -> &str {
        "oracle"
    }
}

fn appliance_for(goal: &str) -> Option<&'static str> {
    let first = goal.split_whitespace().next()?.to_lowercase();
    match first.as_str() {
        "heat" => Some("microwave"),
        "cool" => Some("fridge"),
        "clean" => Some("sinkbasin"),
        "look" => Some("desklamp"),
        _ => None,
    }
}

fn affirmed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Yes, there is (an? .+?) (?:on|in) (?:the|this) ").expect("regex"))
}

fn denied_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^No, I do not see (?:an? |any |the )?(.+?)\.?$").expect("regex"))
}

fn list_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(you see )(.*?)\.(\s|$)").expect("regex"))
}

/// `a egg 1` -> `egg`, `a dining table` -> `dining table`.
fn base_name(item: &str) -> String {
    let mut words: Vec<&str> = item.split_whitespace().collect();
    if matches!(words.first(), Some(&"a" | &"an")) {
        words.remove(0);
    }
    if words.last().is_some_and(|w| w.chars().all(|c| c.is_ascii_digit())) {
        words.pop();
    }
    words.join(" ")
}

fn split_list(list: &str) -> Vec<String> {
    if list.trim() == "nothing" {
        return vec![];
    }
    list.replace(", and ", ", ")
        .split(", ")
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Rule-based stand-in for the language model: recognises the question
/// generation and refinement prompts and answers them deterministically.
#[derive(Debug, Clone)]
pub struct ScriptedReasoner {
    templates: PromptTemplates,
    vocabulary: Vec<String>,
}

impl ScriptedReasoner {
    pub fn new(vocabulary: Vec<String>) -> Self {
        Self {
            templates: PromptTemplates::default(),
            vocabulary,
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    /// Asks about goal entities the description does not mention: the
    /// appliance first, then the rest in goal order.
    fn questions(&self, d_i: &str, goal: &str) -> String {
        let mut ents = entities_by_position(goal, &self.vocabulary);
        if let Some(app) = appliance_for(goal).filter(|a| self.vocabulary.iter().any(|v| v == a)) {
            ents.retain(|e| e != app);
            ents.insert(0, app.to_string());
        }
        let missing: Vec<String> = ents.into_iter().filter(|e| !entity_in(d_i, e)).collect();
        if missing.is_empty() {
            return ALL_INFO.into();
        }
        let items: Vec<String> = missing
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let q = format!("{QUESTION_PREFIX} {} {e}?", article(e));
                format!("\"question{}\": {}", i + 1, serde_json::Value::String(q))
            })
            .collect();
        format!("{{{}}}", items.join(", "))
    }

    /// Adds affirmed items to the description's object list and drops
    /// denied ones.
    fn merge(&self, d_i: &str, qa: &[(String, String)]) -> String {
        let mut added = Vec::new();
        let mut denied = Vec::new();
        for (_, a) in qa {
            if let Some(c) = affirmed_re().captures(a) {
                added.push(c[1].to_string());
            } else if let Some(c) = denied_re().captures(a) {
                denied.push(c[1].to_lowercase());
            }
        }
        let d_i = d_i.trim();
        if let Some(c) = list_re().captures(d_i) {
            let whole = c.get(0).expect("match");
            let list = c.get(2).expect("list group");
            let mut items: Vec<String> = split_list(list.as_str())
                .into_iter()
                .filter(|it| !denied.contains(&base_name(it).to_lowercase()))
                .collect();
            for a in added {
                if !items.contains(&a) {
                    items.push(a);
                }
            }
            format!(
                "{}{}{}.{}{}",
                &d_i[..whole.start()],
                &c[1],
                render_list(&items),
                &c[3],
                &d_i[whole.end()..]
            )
        } else {
            let mut items: Vec<String> = Vec::new();
            for a in added {
                if !items.contains(&a) {
                    items.push(a);
                }
            }
            if items.is_empty() {
                d_i.to_string()
            } else {
                format!("{d_i} You also see {}.", render_list(&items))
            }
        }
    }
}

impl ReasoningModel for ScriptedReasoner {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let p = prompt.strip_suffix(RETRY_SUFFIX).unwrap_or(prompt);
        if let Some(m) = self.templates.question_generation.extract(p) {
            return Ok(self.questions(&m["d_i"], &m["goal"]));
        }
        if let Some(m) = self.templates.refinement.extract(p) {
            let qa = parse_qa_list(&m["qa_pairs"])
                .ok_or_else(|| BackendError::UnrecognizedPrompt("unparseable QA list".into()))?;
            return Ok(self.merge(&m["d_i"], &qa));
        }
        let head: String = prompt.chars().take(60).collect();
        Err(BackendError::UnrecognizedPrompt(head))
    }

    fn id(&self) -> &str {
        "scripted-reasoner"
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::household::{
        standard_vocabulary, toilet_scene, HouseObject, Receptacle, ReceptacleKind, SceneState,
    };
    use crate::env::nav::{Heading, ViewLabel};
    use crate::types::QaPair;

    fn table_scene(objs: &[&str]) -> SceneState {
        let table = Receptacle::new("diningtable", 1, ReceptacleKind::Surface, false);
        let micro = Receptacle::new("microwave", 1, ReceptacleKind::Microwave, true);
        SceneState {
            agent_at: table.entity(),
            objects: objs
                .iter()
                .map(|n| HouseObject::new(n, 1, table.entity()))
                .collect(),
            receptacles: vec![table, micro],
            lamp_on: false,
            examined_under_lamp: Default::default(),
            known_objects: ["apple", "egg", "cd", "mug"].map(String::from).to_vec(),
        }
    }

    fn obs(s: &SceneState) -> Observation {
        Observation::new("ep", 0, Symbolic::Household(s.local_scene(Arc::new(s.vocabulary()))))
    }

    fn oracle(err: f64, omit: f64, hall: f64) -> OraclePerception {
        OraclePerception::new(ScriptedOracleConfig {
            answer_error_rate: err,
            raw_omission_rate: omit,
            hallucination_rate: hall,
            rng_seed: 3,
        })
        .unwrap()
    }

    fn q(text: &str) -> Question {
        Question::new("question1", text)
    }

    #[test]
    fn zero_noise_mentions_everything() {
        let s = table_scene(&["apple", "egg"]);
        let d = oracle(0.0, 0.0, 0.0)
            .describe(&PromptTemplates::default().initial_prompt(), &obs(&s))
            .unwrap();
        assert_eq!(d, "You are at diningtable 1. On the diningtable 1, you see a apple 1, and a egg 1.");
    }

    #[test]
    fn occluded_objects_are_not_described() {
        let s = toilet_scene();
        let d = oracle(0.0, 0.0, 0.0).describe("Describe the scene in detail\n", &obs(&s)).unwrap();
        assert!(d.contains("spraybottle") && !d.contains("toiletpaper"), "{d}");
        // but answers still see it
        let a = oracle(0.0, 0.0, 0.0).answer(&q("Do you see a toiletpaper?"), &obs(&s)).unwrap();
        assert!(a.starts_with("Yes"));
    }

    #[test]
    fn goal_aware_hallucinates_missing_goal_object() {
        let s = table_scene(&["apple"]);
        let prompt = PromptTemplates::default().render_goal_aware("find some cd and put it in shelf").unwrap();
        let d = oracle(0.0, 0.0, 1.0).describe(&prompt, &obs(&s)).unwrap();
        assert!(d.contains("a cd 1"), "{d}");
        let d = oracle(0.0, 0.0, 0.0).describe(&prompt, &obs(&s)).unwrap();
        assert!(!d.contains("cd"));
    }

    #[test]
    fn states_are_never_described() {
        let mut s = table_scene(&["egg"]);
        s.objects[0].hot = true;
        let d = oracle(0.0, 0.0, 0.0).describe("x", &obs(&s)).unwrap();
        assert!(!d.contains("hot"));
    }

    #[test]
    fn truthful_and_flipped_answers() {
        let s = table_scene(&["apple"]);
        let o = obs(&s);
        assert_eq!(
            oracle(0.0, 0.0, 0.0).answer(&q("Do you see a microwave?"), &o).unwrap(),
            "No, I do not see a microwave."
        );
        assert_eq!(
            oracle(0.0, 0.0, 0.0).answer(&q("Do you see an apple?"), &o).unwrap(),
            "Yes, there is a apple 1 on the diningtable 1."
        );
        assert_eq!(
            oracle(1.0, 0.0, 0.0).answer(&q("Do you see an apple?"), &o).unwrap(),
            "No, I do not see a apple."
        );
        assert!(oracle(1.0, 0.0, 0.0)
            .answer(&q("Do you see a microwave?"), &o)
            .unwrap()
            .starts_with("Yes"));
        assert_eq!(
            oracle(0.0, 0.0, 0.0).answer(&q("Do you see a unicorn in the image?"), &o).unwrap(),
            "No, I do not see a unicorn."
        );
        assert!(matches!(
            oracle(0.0, 0.0, 0.0).answer(&q("Is there an apple?"), &o),
            Err(BackendError::QuestionFormat(_))
        ));
    }

    #[test]
    fn zero_error_answers_match_ground_truth_exhaustively() {
        let mut s = table_scene(&["apple", "egg"]);
        s.objects[1].location = crate::env::household::Location::Carried;
        let o = obs(&s);
        let orc = oracle(0.0, 0.0, 0.0);
        let truth = |name: &str| s.objects.iter().any(|x| x.name == name) || name == "diningtable";
        for v in s.vocabulary() {
            let question = q(&format!("Do you see a {v}?"));
            let pol = answer_polarity(&orc.answer(&question, &o).unwrap()).unwrap();
            assert_eq!(pol, truth(&v), "{v}");
            assert_eq!(ground_truth_polarity(&question, &o).unwrap(), truth(&v));
        }
    }

    #[test]
    fn nav_view_answers() {
        let view = NavView {
            node: "n".into(),
            direction: Heading::North,
            label: ViewLabel::Front,
            landmarks: vec!["staircase".into()],
            vocabulary: Arc::new(vec!["staircase".into(), "sofa".into()]),
        };
        let o = Observation::new("ep", 0, Symbolic::Nav(view));
        let orc = oracle(0.0, 0.0, 0.0);
        assert_eq!(orc.describe("x", &o).unwrap(), "You see a staircase.");
        assert_eq!(
            orc.answer(&q("Do you see a staircase?"), &o).unwrap(),
            "Yes, there is a staircase in this view."
        );
        assert!(orc.answer(&q("Do you see a sofa?"), &o).unwrap().starts_with("No"));
    }

    #[test]
    fn reasoner_asks_appliance_first() {
        let r = ScriptedReasoner::new(standard_vocabulary());
        let t = PromptTemplates::default();
        let p = t
            .render_question_generation("You are at countertop 1. On the countertop 1, you see nothing.", "heat some egg and put it in diningtable")
            .unwrap();
        assert_eq!(
            r.complete(&p).unwrap(),
            r#"{"question1": "Do you see a microwave?", "question2": "Do you see an egg?", "question3": "Do you see a diningtable?"}"#
        );
        let p = t
            .render_question_generation("You are at shelf 1. On the shelf 1, you see a egg 1.", "put some egg in shelf")
            .unwrap();
        assert_eq!(r.complete(&p).unwrap(), ALL_INFO);
        let retry = format!("{p}{RETRY_SUFFIX}");
        assert_eq!(r.complete(&retry).unwrap(), ALL_INFO);
    }

    #[test]
    fn reasoner_merges_into_object_list() {
        let r = ScriptedReasoner::new(standard_vocabulary());
        let t = PromptTemplates::default();
        let qa = vec![
            QaPair::new(q("Do you see an egg?"), "Yes, there is a egg 2 on the countertop 1."),
            QaPair::new(q("Do you see a mug?"), "No, I do not see a mug."),
        ];
        let p = t
            .render_refinement("You are at countertop 1. On the countertop 1, you see a mug 1, and a pen 1.", &qa)
            .unwrap();
        assert_eq!(
            r.complete(&p).unwrap(),
            "You are at countertop 1. On the countertop 1, you see a pen 1, and a egg 2."
        );
        let p = t.render_refinement("You are at fridge 1. The fridge 1 is closed.", &qa).unwrap();
        assert_eq!(
            r.complete(&p).unwrap(),
            "You are at fridge 1. The fridge 1 is closed. You also see a egg 2."
        );
        assert!(r.complete("hello").is_err());
    }

    #[test]
    fn polarity_classifier() {
        assert_eq!(answer_polarity("Yes, there is"), Some(true));
        assert_eq!(answer_polarity("  no."), Some(false));
        assert_eq!(answer_polarity("Nothing here"), None);
        assert_eq!(answer_polarity("Maybe"), None);
    }

    #[test]
    fn config_validation() {
        assert!(OraclePerception::new(ScriptedOracleConfig {
            answer_error_rate: 1.5,
            ..Default::default()
        })
        .is_err());
    }
}
