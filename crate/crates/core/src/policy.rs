//! Action selection.
//!
//! Two policies share the prompt type. [`select_action`] scores candidate
//! action strings with a language model as the product of per-token
//! probabilities. [`CompactPolicyParams`] is a small trainable linear-softmax model
//! over hashed prompt features, with a value head, used for BC and PPO.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, ScoringModel};
use crate::exec::Exec;
use crate::templates::{Template, TemplateError};
use crate::types::{ActionText, Description, Goal, HistoryWindow};
use crate::util::{normalize_tokens, stable_hash};

pub const POLICY_TEMPLATE: &str = include_str!("../templates/policy.txt");

pub const CHECKPOINT_FORMAT: &str = "prism-compact-policy";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_FEATURE_DIM: usize = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("no candidate actions to choose from")]
    EmptyCandidates,
    #[error("scoring `{action}` failed: {source}")]
    Scoring {
        action: String,
        #[source]
        source: BackendError,
    },
    #[error("action `{0}` is not in the policy's action vocabulary")]
    UnknownAction(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Context the policy conditions on: goal, recent history, current scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPrompt {
    pub goal: Goal,
    pub history_render: String,
    pub d_f: Description,
}

fn policy_template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| Template::parse("policy", POLICY_TEMPLATE).expect("policy template parses"))
}

impl PolicyPrompt {
    pub fn new(goal: Goal, history: &HistoryWindow, d_f: Description) -> Self {
        Self {
            goal,
            history_render: history.render(),
            d_f,
        }
    }

    /// The canonical prompt text, ending with "Next action of the agent: ".
    pub fn render(&self) -> String {
        let history = if self.history_render.is_empty() {
            String::new()
        } else {
            format!("History:\n{}\n\n", self.history_render)
        };
        policy_template()
            .render(&[
                ("goal", self.goal.as_str()),
                ("history", &history),
                ("d_f", &self.d_f.text),
            ])
            .expect("policy template slots are fixed")
    }

    /// Actions listed in the rendered history, oldest first.
    pub fn history_actions(&self) -> impl Iterator<Item = &str> {
        self.history_render
            .lines()
            .filter_map(|l| l.strip_prefix("Action: "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub action: ActionText,
    /// Sum of per-token log-probabilities.
    pub logprob: f64,
}

impl ScoredAction {
    pub fn probability(&self) -> f64 {
        self.logprob.exp()
    }
}

pub fn score_action(
    lm: &dyn ScoringModel,
    prompt: &PolicyPrompt,
    action: &ActionText,
) -> Result<ScoredAction, PolicyError> {
    score_rendered(lm, &prompt.render(), action)
}

fn score_rendered(lm: &dyn ScoringModel, context: &str, action: &ActionText) -> Result<ScoredAction, PolicyError> {
    let lps = lm
        .token_logprobs(context, action.as_str())
        .map_err(|source| PolicyError::Scoring {
            action: action.to_string(),
            source,
        })?;
    Ok(ScoredAction {
        action: action.clone(),
        logprob: lps.iter().sum(),
    })
}

/// Index of the best-scoring action; ties go to the lexicographically
/// smaller action text.
pub fn argmax_scored(scored: &[ScoredAction]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scored.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scored[b];
                if s.logprob > cur.logprob || (s.logprob == cur.logprob && s.action < cur.action) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Scores every candidate and returns the most probable one.
pub fn select_action(
    lm: &dyn ScoringModel,
    prompt: &PolicyPrompt,
    candidates: &[ActionText],
    fan_out: Exec,
) -> Result<ScoredAction, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let context = prompt.render();
    let scored = fan_out
        .map(candidates, |a| score_rendered(lm, &context, a))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let i = argmax_scored(&scored).expect("non-empty");
    Ok(scored[i].clone())
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

const FEATURE_SEED_SALT: u64 = 0x5052_4953_4d00_0001;

const GOAL_STOPWORDS: [&str; 10] = ["a", "an", "and", "it", "some", "the", "them", "there", "to", "two"];

const PROCESS_VERBS: [&str; 4] = ["clean", "cool", "heat", "use"];

fn re(pat: &'static str, cell: &'static OnceLock<Regex>) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("regex"))
}

fn here_re() -> &'static Regex {
    static C: OnceLock<Regex> = OnceLock::new();
    re(r"you are at (\w+ \d+)", &C)
}

fn held_re() -> &'static Regex {
    static C: OnceLock<Regex> = OnceLock::new();
    re(r"(?:hand holds|you are holding) an? (\w+ \d+)", &C)
}

fn openness_re() -> &'static Regex {
    static C: OnceLock<Regex> = OnceLock::new();
    re(r"the (\w+ \d+) is (open|closed)", &C)
}

fn section_re() -> &'static Regex {
    static C: OnceLock<Regex> = OnceLock::new();
    re(r"(?m)^(front|left|right|back): (.*)$", &C)
}

/// What the featurizer reads off a prompt. Text-only: everything here is
/// recovered from the rendered goal, history and description.
#[derive(Debug, Clone, Default)]
struct PromptContext {
    goal_tokens: BTreeSet<String>,
    here: Option<String>,
    held: Option<String>,
    /// `name id` bigrams mentioned in the description.
    seen: BTreeSet<String>,
    last_action: Option<String>,
    features: Vec<String>,
}

fn entity_bigrams(text: &str) -> BTreeSet<String> {
    let toks = normalize_tokens(text);
    toks.windows(2)
        .filter(|w| w[1].chars().all(|c| c.is_ascii_digit()) && !w[0].chars().all(|c| c.is_ascii_digit()))
        .map(|w| format!("{} {}", w[0], w[1]))
        .collect()
}

impl PromptContext {
    fn parse(p: &PolicyPrompt) -> Self {
        let goal_all = normalize_tokens(p.goal.as_str());
        let goal_verb = goal_all.first().cloned().unwrap_or_default();
        let goal_tokens: BTreeSet<String> = goal_all
            .into_iter()
            .filter(|t| !GOAL_STOPWORDS.contains(&t.as_str()))
            .collect();
        let d = p.d_f.text.to_lowercase();
        let here = here_re().captures(&d).map(|c| c[1].to_string());
        let held = held_re().captures(&d).map(|c| c[1].to_string());
        let seen = entity_bigrams(&d);
        let actions: Vec<String> = p.history_actions().map(|a| a.trim().to_lowercase()).collect();
        let history_verbs: BTreeSet<String> = actions
            .iter()
            .filter_map(|a| a.split_whitespace().next().map(str::to_string))
            .collect();
        let last_action = actions.last().cloned();

        let mut f = vec!["bias".to_string(), format!("gv:{goal_verb}")];
        f.extend(goal_tokens.iter().map(|t| format!("g:{t}")));
        let hold = match &held {
            None => "none",
            Some(h) if goal_tokens.contains(h.split(' ').next().unwrap_or("")) => "goal",
            Some(_) => "other",
        };
        f.push(format!("hold:{hold}"));
        if let Some(h) = &here {
            let name = h.split(' ').next().unwrap_or("");
            f.push(format!("here:{name}"));
            if goal_tokens.contains(name) {
                f.push("here:goal".into());
            }
            for c in openness_re().captures_iter(&d) {
                if &c[1] == h {
                    f.push(format!("here:{}", &c[2]));
                }
            }
        }
        let seen_goal = seen.iter().any(|e| {
            Some(e) != here.as_ref()
                && Some(e) != held.as_ref()
                && goal_tokens.contains(e.split(' ').next().unwrap_or(""))
        });
        if seen_goal {
            f.push("seen:goal".into());
        }
        let processed: Vec<&str> = PROCESS_VERBS
            .iter()
            .copied()
            .filter(|v| history_verbs.contains(*v))
            .collect();
        for v in &processed {
            f.push(format!("hist:{v}"));
        }
        f.push(format!("phase:{goal_verb}|{hold}|{}", processed.join("+")));
        if let Some(last) = &last_action {
            let words: Vec<&str> = last.split_whitespace().filter(|w| !w.chars().all(|c| c.is_ascii_digit())).collect();
            f.push(format!("last:{}", words.first().unwrap_or(&"")));
            f.push(format!("last:{}", words.join(" ")));
        } else {
            f.push("last:none".into());
        }
        for c in section_re().captures_iter(&d) {
            let label = &c[1];
            let body = normalize_tokens(&c[2]);
            let hit = body.iter().any(|t| goal_tokens.contains(t) && t != "stop" && t != "go");
            f.push(format!("sec:{label}:{}", if hit { "goal" } else { "other" }));
            if body.iter().any(|t| t == "nothing") {
                f.push(format!("sec:{label}:empty"));
            }
            if hit {
                f.push("sec:any:goal".into());
            }
        }
        Self {
            goal_tokens,
            here,
            held,
            seen,
            last_action,
            features: f,
        }
    }

    /// Tokens of `action` relative to this context.
    fn action_tokens(&self, action: &str) -> Vec<String> {
        let words: Vec<String> = action.split_whitespace().map(str::to_lowercase).collect();
        let verb = words.first().cloned().unwrap_or_default();
        let mut plain = Vec::new();
        let mut entities = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let is_id = |w: &String| w.chars().all(|c| c.is_ascii_digit());
            if i + 1 < words.len() && is_id(&words[i + 1]) && !is_id(&words[i]) {
                entities.push((words[i].clone(), words[i + 1].clone()));
                i += 2;
            } else {
                plain.push(words[i].clone());
                i += 1;
            }
        }
        let mut t = vec![format!("v:{verb}"), format!("p:{}", plain.join(" "))];
        for (k, (name, id)) in entities.iter().enumerate() {
            let ent = format!("{name} {id}");
            let bits = [
                ("goal", self.goal_tokens.contains(name)),
                ("here", self.here.as_deref() == Some(ent.as_str())),
                ("seen", self.seen.contains(&ent)),
                ("held", self.held.as_deref() == Some(ent.as_str())),
                ("last", self.last_action.as_deref().is_some_and(|l| l.contains(ent.as_str()))),
            ];
            let sig: String = bits.iter().map(|(_, b)| if *b { '1' } else { '0' }).collect();
            t.push(format!("{verb}|e{k}:{name}"));
            t.push(format!("{verb}|e{k}#{id}"));
            t.push(format!("{verb}|e{k}@{sig}"));
            for (label, b) in bits {
                if b {
                    t.push(format!("{verb}|e{k}:{label}"));
                }
            }
        }
        if entities.len() == 2 {
            t.push(format!("{verb}|{}|{}", entities[0].0, entities[1].0));
        }
        t
    }
}

/// Sparse non-negative counts over `feature_dim` hashed buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub dim: usize,
    /// Sorted by bucket, no duplicates.
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, v)| (i, v * k)).collect(),
        }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| w[i as usize] * v).sum()
    }
}

/// A prompt featurized against an action vocabulary: the prompt's feature
/// hashes, the distinct action tokens, and which tokens each action uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub prompt: Vec<u64>,
    pub tokens: Vec<u64>,
    pub action_tokens: Vec<Vec<u32>>,
    value: FeatureVector,
}

impl Featurized {
    pub fn value_features(&self) -> &FeatureVector {
        &self.value
    }
}

/// Parameters of the compact policy.
///
/// The policy matrix is token-factored: instead of one row per action, each
/// action's logit is the sum over its tokens of a weight row dotted with the
/// prompt features, with rows and columns hashed together into
/// `feature_dim` buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactPolicyParams {
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub action_vocab: Vec<ActionText>,
    pub w_policy: Vec<f64>,
    pub w_value: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: CompactPolicyParams,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(29).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 29)
}

impl CompactPolicyParams {
    pub fn zeros(action_vocab: Vec<ActionText>, feature_dim: usize, feature_seed: u64) -> Self {
        assert!(feature_dim > 0, "feature_dim must be positive");
        Self {
            feature_dim,
            feature_seed,
            action_vocab,
            w_policy: vec![0.0; feature_dim],
            w_value: vec![0.0; feature_dim],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w_policy.len() + self.w_value.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w_policy.iter().chain(&self.w_value).all(|w| w.is_finite())
    }

    pub fn action_index(&self, a: &ActionText) -> Option<usize> {
        self.action_vocab.iter().position(|x| x == a)
    }

    fn hash(&self, kind: &str, s: &str) -> u64 {
        stable_hash(self.feature_seed ^ FEATURE_SEED_SALT, &[kind, s])
    }

    /// Bucket of the policy weight pairing action token `t` with prompt
    /// feature `f`.
    pub fn joint_bucket(&self, t: u64, f: u64) -> usize {
        (mix(t, f) % self.feature_dim as u64) as usize
    }

    /// Token hash as used by [`Featurized::tokens`].
    pub fn token_hash(&self, token: &str) -> u64 {
        self.hash("t", token)
    }

    /// Prompt-feature hash as used by [`Featurized::prompt`].
    pub fn feature_hash(&self, feature: &str) -> u64 {
        self.hash("f", feature)
    }

    pub fn feature_vector(&self, p: &PolicyPrompt) -> FeatureVector {
        self.feature_vector_of(&PromptContext::parse(p).features)
    }

    fn feature_vector_of(&self, features: &[String]) -> FeatureVector {
        let mut m: HashMap<u32, f64> = HashMap::new();
        for f in features {
            let b = (self.feature_hash(f) % self.feature_dim as u64) as u32;
            *m.entry(b).or_default() += 1.0;
        }
        let mut entries: Vec<(u32, f64)> = m.into_iter().collect();
        entries.sort_by_key(|e| e.0);
        FeatureVector {
            dim: self.feature_dim,
            entries,
        }
    }

    pub fn featurize(&self, p: &PolicyPrompt) -> Featurized {
        let ctx = PromptContext::parse(p);
        let prompt: Vec<u64> = ctx.features.iter().map(|f| self.feature_hash(f)).collect();
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut tokens = Vec::new();
        let action_tokens = self
            .action_vocab
            .iter()
            .map(|a| {
                ctx.action_tokens(a.as_str())
                    .into_iter()
                    .map(|t| {
                        *index.entry(t).or_insert_with_key(|t| {
                            tokens.push(self.token_hash(t));
                            (tokens.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .collect();
        Featurized {
            value: self.feature_vector_of(&ctx.features),
            prompt,
            tokens,
            action_tokens,
        }
    }

    fn token_scores(&self, f: &Featurized) -> Vec<f64> {
        f.tokens
            .iter()
            .map(|&t| f.prompt.iter().map(|&p| self.w_policy[self.joint_bucket(t, p)]).sum())
            .collect()
    }

    pub fn logits_featurized(&self, f: &Featurized) -> Vec<f64> {
        let s = self.token_scores(f);
        f.action_tokens
            .iter()
            .map(|ts| ts.iter().map(|&i| s[i as usize]).sum())
            .collect()
    }

    /// Adds `Σ_a dlogits[a] · ∂logit_a/∂w_policy` into `grad`.
    pub fn accumulate_policy_grad(&self, f: &Featurized, dlogits: &[f64], grad: &mut [f64]) {
        let mut dtok = vec![0.0; f.tokens.len()];
        for (ts, &d) in f.action_tokens.iter().zip(dlogits) {
            if d != 0.0 {
                for &i in ts {
                    dtok[i as usize] += d;
                }
            }
        }
        for (&t, &d) in f.tokens.iter().zip(&dtok) {
            if d != 0.0 {
                for &p in &f.prompt {
                    grad[self.joint_bucket(t, p)] += d;
                }
            }
        }
    }

    pub fn value_featurized(&self, f: &Featurized) -> f64 {
        f.value.dot(&self.w_value)
    }

    pub fn value_of(&self, fv: &FeatureVector) -> f64 {
        fv.dot(&self.w_value)
    }

    pub fn accumulate_value_grad(&self, f: &Featurized, dv: f64, grad: &mut [f64]) {
        for &(i, v) in &f.value.entries {
            grad[i as usize] += dv * v;
        }
    }

    pub fn to_checkpoint_json(&self) -> Result<String, PolicyError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        serde_json::to_string(&ck).map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        let p = ck.params;
        if p.w_policy.len() != p.feature_dim || p.w_value.len() != p.feature_dim || !p.is_finite() {
            return Err(PolicyError::Checkpoint("weight shapes or values are invalid".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Log-probabilities over `params.action_vocab`.
pub fn compact_logits(params: &CompactPolicyParams, p: &PolicyPrompt) -> Vec<f64> {
    log_softmax(&params.logits_featurized(&params.featurize(p)))
}

pub fn compact_value(params: &CompactPolicyParams, p: &PolicyPrompt) -> f64 {
    params.value_of(&params.feature_vector(p))
}

/// Greedy choice of the compact policy, restricted to `candidates` when
/// given. Ties go to the lexicographically smaller action.
pub fn compact_select(
    params: &CompactPolicyParams,
    p: &PolicyPrompt,
    candidates: Option<&[ActionText]>,
) -> Result<ScoredAction, PolicyError> {
    let lp = compact_logits(params, p);
    let scored: Vec<ScoredAction> = params
        .action_vocab
        .iter()
        .zip(lp)
        .filter(|(a, _)| candidates.is_none_or(|c| c.contains(a)))
        .map(|(a, logprob)| ScoredAction {
            action: a.clone(),
            logprob,
        })
        .collect();
    let i = argmax_scored(&scored).ok_or(PolicyError::EmptyCandidates)?;
    Ok(scored[i].clone())
}
