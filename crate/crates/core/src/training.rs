//! Demonstration collection, behavioural cloning and PPO for the compact
//! policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Actor, Agent, AgentError, EpisodeRunner};
use crate::env::household::HouseholdExpert;
use crate::exec::Exec;
use crate::policy::{log_softmax, CompactPolicyParams, Featurized, PolicyPrompt};
use crate::types::{ActionText, Description, DescriptionKind, Environment, Goal, Trajectory};
use crate::util::{keyed_rng, sha256_hex};

const GRAD_CHUNK: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("action `{0}` is not in the policy's action vocabulary")]
    UnknownAction(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("PPO needs BC-initialised parameters; pass a BC checkpoint or set allow_uninitialized")]
    NotInitialized,
    #[error("loss became non-finite at {stage} {index}")]
    Diverged { stage: &'static str, index: usize },
    #[error("non-finite probability ratio at batch step {0}")]
    NonFiniteRatio(usize),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub episode_id: String,
    pub family: String,
    pub step: usize,
    pub goal: String,
    pub history_render: String,
    pub d_f: String,
    pub action: String,
    pub reward: f64,
}

impl DemoRecord {
    pub fn prompt(&self) -> PolicyPrompt {
        PolicyPrompt {
            goal: Goal::new(self.goal.clone()).expect("recorded goals are non-empty"),
            history_render: self.history_render.clone(),
            d_f: Description::new(self.d_f.clone(), DescriptionKind::Final, "demo")
                .expect("recorded descriptions are non-empty"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub split: String,
    pub records: Vec<DemoRecord>,
    pub episodes_kept: usize,
    pub episodes_dropped: usize,
}

impl DemoDataset {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("demo serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(split: &str, text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<DemoRecord>, _>>()?;
        let mut ids: Vec<&str> = records.iter().map(|r| r.episode_id.as_str()).collect();
        ids.dedup();
        Ok(Self {
            split: split.into(),
            episodes_kept: ids.len(),
            episodes_dropped: 0,
            records,
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Rolls the demonstrator with perception active at every step and keeps
/// successful episodes only. An abandoned episode (per `failure_rate`) stops
/// early and is dropped.
pub fn collect_demos<E, F>(
    agent: Agent<'_>,
    make_env: F,
    tasks: &[(E::Task, u64)],
    failure_rate: f64,
    split: &str,
    exec: Exec,
) -> Result<DemoDataset, TrainError>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    let expert = HouseholdExpert::new(failure_rate);
    let runs = exec.map(tasks, |(task, seed)| -> Result<Option<Trajectory>, AgentError> {
        let abandon = expert.abandon_step(*seed);
        let mut run = EpisodeRunner::start(agent, make_env(), task, *seed);
        let mut t = 0;
        while !run.is_done() {
            if abandon == Some(t) {
                return Ok(None);
            }
            run.observe()?;
            let Some(a) = run.env().expert_action() else {
                return Ok(None);
            };
            run.act(a)?;
            t += 1;
        }
        let log = run.finish();
        Ok((log.trajectory.success && abandon.is_none()).then_some(log.trajectory))
    });
    let mut ds = DemoDataset {
        split: split.into(),
        ..Default::default()
    };
    for r in runs {
        match r? {
            Some(tr) => {
                ds.episodes_kept += 1;
                ds.records.extend(tr.records().map(|rec| DemoRecord {
                    episode_id: rec.episode_id,
                    family: tr.family.clone(),
                    step: rec.step,
                    goal: rec.goal,
                    history_render: rec.history_render,
                    d_f: rec.d_f,
                    action: rec.action,
                    reward: rec.reward,
                }));
            }
            None => ds.episodes_dropped += 1,
        }
    }
    if ds.episodes_kept == 0 && !tasks.is_empty() {
        tracing::warn!(dropped = ds.episodes_dropped, "no successful demonstrations collected");
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradient with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

impl Grad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            policy: vec![0.0; dim],
            value: vec![0.0; dim],
        }
    }

    fn add(mut self, o: &Grad) -> Self {
        for (a, b) in self.policy.iter_mut().zip(&o.policy) {
            *a += b;
        }
        for (a, b) in self.value.iter_mut().zip(&o.value) {
            *a += b;
        }
        self
    }

    fn scale(&mut self, k: f64) {
        self.policy.iter_mut().chain(self.value.iter_mut()).for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.policy.iter().chain(&self.value).map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcExample {
    pub features: Featurized,
    pub target: usize,
}

/// Featurizes demonstrations against `params.action_vocab`.
pub fn bc_examples(params: &CompactPolicyParams, records: &[DemoRecord], exec: Exec) -> Result<Vec<BcExample>, TrainError> {
    exec.map(records, |r| {
        let target = params
            .action_index(&ActionText::new(r.action.clone()))
            .ok_or_else(|| TrainError::UnknownAction(r.action.clone()))?;
        Ok(BcExample {
            features: params.featurize(&r.prompt()),
            target,
        })
    })
    .into_iter()
    .collect()
}

/// Mean negative log-likelihood of the targets and its gradient.
pub fn bc_loss(params: &CompactPolicyParams, batch: &[BcExample], exec: Exec) -> Result<(f64, Grad), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = params.action_vocab.len();
    if let Some(e) = batch.iter().find(|e| e.target >= n) {
        return Err(TrainError::UnknownAction(format!("index {}", e.target)));
    }
    let dim = params.feature_dim;
    let (loss, mut grad) = exec.chunked_reduce(
        batch,
        GRAD_CHUNK,
        |chunk| {
            let mut g = Grad::zeros(dim);
            let mut l = 0.0;
            for ex in chunk {
                let lp = log_softmax(&params.logits_featurized(&ex.features));
                l -= lp[ex.target];
                let mut d: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                d[ex.target] -= 1.0;
                params.accumulate_policy_grad(&ex.features, &d, &mut g.policy);
            }
            (l, g)
        },
        (0.0, Grad::zeros(dim)),
        |(la, ga), (lb, gb)| (la + lb, ga.add(&gb)),
    );
    let m = batch.len() as f64;
    grad.scale(1.0 / m);
    Ok((loss / m, grad))
}

// ---------------------------------------------------------------------------
// Returns and advantages
// ---------------------------------------------------------------------------

/// `G_t = r_t + γ G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimation over one terminated episode.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// Rescales to mean 0, standard deviation 1. Leaves constant input centred.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if sd > 1e-8 {
            *x /= sd;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdvantageEstimator {
    /// Monte-Carlo return minus the value baseline.
    MonteCarlo,
    Gae { lambda: f64 },
}

/// Returns and advantages for one episode.
pub fn compute_returns_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    estimator: AdvantageEstimator,
) -> (Vec<f64>, Vec<f64>) {
    let returns = discounted_returns(rewards, gamma);
    let adv = match estimator {
        AdvantageEstimator::MonteCarlo => returns.iter().zip(values).map(|(g, v)| g - v).collect(),
        AdvantageEstimator::Gae { lambda } => gae(rewards, values, gamma, lambda),
    };
    (returns, adv)
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs_per_batch: usize,
    pub batch_size: usize,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    pub advantage: AdvantageEstimator,
    /// Episodes rolled out between updates.
    pub episodes_per_iteration: usize,
    pub total_episodes: usize,
    pub allow_uninitialized: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.1,
            entropy_coef: 0.001,
            gamma: 0.99,
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs_per_batch: 4,
            batch_size: 64,
            value_coef: 0.5,
            normalize_advantages: true,
            advantage: AdvantageEstimator::MonteCarlo,
            episodes_per_iteration: 25,
            total_episodes: 200,
            allow_uninitialized: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return Err(format!("clip_eps must be > 0, got {}", self.clip_eps));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 || self.epochs_per_batch == 0 || self.episodes_per_iteration == 0 {
            return Err("batch_size, epochs_per_batch and episodes_per_iteration must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err("learning_rate must be > 0 and momentum in [0, 1)".into());
        }
        if let AdvantageEstimator::Gae { lambda } = self.advantage {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(format!("GAE lambda must lie in [0, 1], got {lambda}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoStep {
    pub features: Featurized,
    pub action: usize,
    pub old_logprob: f64,
    pub reward: f64,
    pub value: f64,
    pub ret: f64,
    pub advantage: f64,
}

/// `min(r·Â, clip(r, 1-ε, 1+ε)·Â)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Loss terms reported alongside the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLossParts {
    pub surrogate: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

/// `-surrogate - c_H·H(π) + c_V·(V - G)²`, averaged over the batch, with its
/// gradient.
pub fn ppo_loss(
    params: &CompactPolicyParams,
    batch: &[PpoStep],
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<(f64, Grad, PpoLossParts), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let dim = params.feature_dim;
    let eps = cfg.clip_eps;
    let indexed: Vec<(usize, &PpoStep)> = batch.iter().enumerate().collect();
    let zero = || ([0.0f64; 4], Grad::zeros(dim), None::<usize>);
    let (sums, mut grad, bad) = exec.chunked_reduce(
        &indexed,
        GRAD_CHUNK,
        |chunk| {
            let (mut s, mut g, mut bad) = zero();
            for &(i, st) in chunk {
                let lp = log_softmax(&params.logits_featurized(&st.features));
                let pi: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                let ratio = (lp[st.action] - st.old_logprob).exp();
                if !ratio.is_finite() {
                    bad.get_or_insert(i);
                    continue;
                }
                let a = st.advantage;
                let surr = clipped_surrogate(ratio, a, eps);
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                let unclipped_active = clipped == ratio || ratio * a <= clipped * a;
                let h: f64 = -pi.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                let v = params.value_featurized(&st.features);
                s[0] -= surr;
                s[1] += h;
                s[2] += (v - st.ret).powi(2);
                if clipped != ratio {
                    s[3] += 1.0;
                }
                let mut d = vec![0.0; pi.len()];
                if unclipped_active && a != 0.0 {
                    for (k, dk) in d.iter_mut().enumerate() {
                        *dk = a * ratio * pi[k];
                    }
                    d[st.action] -= a * ratio;
                }
                if cfg.entropy_coef != 0.0 {
                    for (k, dk) in d.iter_mut().enumerate() {
                        *dk += cfg.entropy_coef * pi[k] * (lp[k] + h);
                    }
                }
                params.accumulate_policy_grad(&st.features, &d, &mut g.policy);
                params.accumulate_value_grad(&st.features, 2.0 * cfg.value_coef * (v - st.ret), &mut g.value);
            }
            (s, g, bad)
        },
        zero(),
        |(sa, ga, ba), (sb, gb, bb)| {
            let mut s = sa;
            for k in 0..4 {
                s[k] += sb[k];
            }
            (s, ga.add(&gb), ba.or(bb))
        },
    );
    if let Some(i) = bad {
        return Err(TrainError::NonFiniteRatio(i));
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    let parts = PpoLossParts {
        surrogate: -sums[0] / n,
        entropy: sums[1] / n,
        value_loss: sums[2] / n,
        clip_fraction: sums[3] / n,
    };
    let loss = sums[0] / n + -(cfg.entropy_coef * parts.entropy) + cfg.value_coef * parts.value_loss;
    Ok((loss, grad, parts))
}

// ---------------------------------------------------------------------------
// Optimisation loops
// ---------------------------------------------------------------------------

/// Plain SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Grad,
}

impl Sgd {
    pub fn new(dim: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Grad::zeros(dim),
        }
    }

    pub fn step(&mut self, params: &mut CompactPolicyParams, g: &Grad) {
        let pairs = [
            (&mut self.velocity.policy, &g.policy, &mut params.w_policy),
            (&mut self.velocity.value, &g.value, &mut params.w_value),
        ];
        for (v, g, w) in pairs {
            for i in 0..w.len() {
                if g[i] != 0.0 || v[i] != 0.0 {
                    v[i] = self.momentum * v[i] + g[i];
                    w[i] -= self.lr * v[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_sr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CompactPolicyParams,
    pub best_probe_sr: Option<f64>,
    pub log: Vec<EpochMetrics>,
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Minibatch SGD on the BC loss. When `probe` is given it is evaluated after
/// every epoch and the best-scoring parameters are returned.
pub fn train_bc(
    mut params: CompactPolicyParams,
    examples: &[BcExample],
    cfg: &BcConfig,
    probe: Option<&dyn Fn(&CompactPolicyParams) -> f64>,
    exec: Exec,
) -> Result<TrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut opt = Sgd::new(params.feature_dim, cfg.learning_rate, cfg.momentum);
    let mut rng = keyed_rng(cfg.seed, &["bc-shuffle"]);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, CompactPolicyParams)> = None;
    for epoch in 0..cfg.epochs {
        let order = shuffled(examples.len(), &mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<BcExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let (loss, g) = bc_loss(&params, &batch, exec)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { stage: "bc epoch", index: epoch });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut params, &g);
        }
        let probe_sr = probe.map(|f| f(&params));
        if let Some(sr) = probe_sr {
            if best.as_ref().is_none_or(|(b, _)| sr > *b) {
                best = Some((sr, params.clone()));
            }
        }
        log.push(EpochMetrics {
            epoch,
            loss: total / examples.len() as f64,
            probe_sr,
        });
    }
    Ok(match best {
        Some((sr, p)) => TrainOutcome {
            params: p,
            best_probe_sr: Some(sr),
            log,
        },
        None => TrainOutcome {
            params,
            best_probe_sr: None,
            log,
        },
    })
}

/// Per-family probe success rates; the selection score is their mean.
pub type ProbeFn<'a> = dyn Fn(&CompactPolicyParams) -> Result<Vec<(String, f64)>, TrainError> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoIteration {
    pub iteration: usize,
    pub episodes: usize,
    pub train_sr: f64,
    pub loss: f64,
    pub parts: PpoLossParts,
    pub probe: Vec<(String, f64)>,
    pub probe_mean: f64,
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub params: CompactPolicyParams,
    pub initial_probe: Vec<(String, f64)>,
    pub best_probe: Vec<(String, f64)>,
    pub best_iteration: usize,
    pub log: Vec<PpoIteration>,
}

fn mean_sr(v: &[(String, f64)]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64
    }
}

fn sample_index(lp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

/// One sampled episode under the current parameters.
fn rollout<E: Environment>(
    params: &CompactPolicyParams,
    agent: Agent<'_>,
    env: E,
    task: &E::Task,
    seed: u64,
    iteration: usize,
    cfg: &PpoConfig,
) -> Result<(Vec<PpoStep>, bool), TrainError> {
    let mut run = EpisodeRunner::start(agent, env, task, seed);
    let mut steps = Vec::new();
    let mut rng = keyed_rng(cfg.seed, &["ppo-rollout", &iteration.to_string(), &seed.to_string()]);
    while !run.is_done() {
        let prompt = run.observe()?;
        let f = params.featurize(&prompt);
        let lp = log_softmax(&params.logits_featurized(&f));
        let a = sample_index(&lp, rng.gen::<f64>());
        let value = params.value_featurized(&f);
        let out = run.act(params.action_vocab[a].clone())?;
        steps.push(PpoStep {
            features: f,
            action: a,
            old_logprob: lp[a],
            reward: out.reward,
            value,
            ret: 0.0,
            advantage: 0.0,
        });
    }
    let success = run.finish().trajectory.success;
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
    let (ret, adv) = compute_returns_advantages(&rewards, &values, cfg.gamma, cfg.advantage);
    for (s, (g, a)) in steps.iter_mut().zip(ret.into_iter().zip(adv)) {
        s.ret = g;
        s.advantage = a;
    }
    Ok((steps, success))
}

/// Synchronous PPO: roll out a wave of episodes with perception active, then
/// run epochs of minibatch updates. Keeps the parameters with the best mean
/// probe success rate, the initial ones included.
pub fn train_ppo<E, F>(
    params: CompactPolicyParams,
    bc_initialized: bool,
    agent: Agent<'_>,
    make_env: F,
    train_tasks: &[(E::Task, u64)],
    probe: &ProbeFn<'_>,
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<PpoOutcome, TrainError>
where
    E: Environment,
    E::Task: Sync,
    F: Fn() -> E + Sync,
{
    if !bc_initialized && !cfg.allow_uninitialized {
        return Err(TrainError::NotInitialized);
    }
    if train_tasks.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let initial_probe = probe(&params)?;
    let mut best = (mean_sr(&initial_probe), initial_probe.clone(), params.clone(), 0usize);
    let mut params = params;
    let mut opt = Sgd::new(params.feature_dim, cfg.learning_rate, cfg.momentum);
    let mut shuffle_rng = keyed_rng(cfg.seed, &["ppo-shuffle"]);
    let mut log = Vec::new();
    let mut done = 0usize;
    let mut iteration = 0usize;
    while done < cfg.total_episodes {
        iteration += 1;
        let n = cfg.episodes_per_iteration.min(cfg.total_episodes - done);
        let wave: Vec<&(E::Task, u64)> = (0..n).map(|k| &train_tasks[(done + k) % train_tasks.len()]).collect();
        let results = exec.map(&wave, |(task, seed)| rollout(&params, agent, make_env(), task, *seed, iteration, cfg));
        let mut batch = Vec::new();
        let mut wins = 0usize;
        for r in results {
            let (steps, success) = r?;
            wins += usize::from(success);
            batch.extend(steps);
        }
        done += n;
        if cfg.normalize_advantages {
            let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
            normalize(&mut adv);
            for (s, a) in batch.iter_mut().zip(adv) {
                s.advantage = a;
            }
        }
        let mut last = (0.0, PpoLossParts::default());
        for _ in 0..cfg.epochs_per_batch {
            for idx in shuffled(batch.len(), &mut shuffle_rng).chunks(cfg.batch_size) {
                let mb: Vec<PpoStep> = idx.iter().map(|&i| batch[i].clone()).collect();
                let (loss, g, parts) = ppo_loss(&params, &mb, cfg, exec)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { stage: "ppo iteration", index: iteration });
                }
                opt.step(&mut params, &g);
                last = (loss, parts);
            }
        }
        let probe_sr = probe(&params)?;
        let m = mean_sr(&probe_sr);
        if m > best.0 {
            best = (m, probe_sr.clone(), params.clone(), iteration);
        }
        tracing::info!(iteration, train_sr = wins as f64 / n as f64, probe_mean = m, "ppo iteration");
        log.push(PpoIteration {
            iteration,
            episodes: n,
            train_sr: wins as f64 / n as f64,
            loss: last.0,
            parts: last.1,
            probe: probe_sr,
            probe_mean: m,
        });
    }
    Ok(PpoOutcome {
        params: best.2,
        initial_probe,
        best_probe: best.1,
        best_iteration: best.3,
        log,
    })
}

/// Greedy success rate of `params` over `tasks`.
pub fn greedy_success_rate<E, F>(
    params: &CompactPolicyParams,
    agent: Agent<'_>,
    make_env: F,
    tasks: &[(E::Task, u64)],
    exec: Exec,
) -> Result<f64, TrainError>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let logs = crate::agent::run_batch(agent, make_env, tasks, &Actor::Compact(params), exec);
    let mut wins = 0usize;
    for l in logs {
        wins += usize::from(l?.trajectory.success);
    }
    Ok(wins as f64 / tasks.len() as f64)
}
