use std::sync::Mutex;

use super::{BackendError, PerceptionModel, ReasoningModel, ScoringModel};
use crate::types::{Observation, Question};

/// ln(1/2): every whitespace token gets probability one half.
pub const MOCK_HALF_LOGPROB: f64 = -std::f64::consts::LN_2;

/// Scripted test double. Every text-producing call (describe, answer,
/// complete) consumes the next script entry; scoring assigns a fixed
/// log-probability per whitespace token and consumes nothing.
#[derive(Debug)]
pub struct MockBackend {
    id: String,
    script: Vec<String>,
    cursor: Mutex<usize>,
    repeat: bool,
    per_token_logprob: f64,
}

impl MockBackend {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self {
            id: "mock".into(),
            script: script.into_iter().map(Into::into).collect(),
            cursor: Mutex::new(0),
            repeat: false,
            per_token_logprob: MOCK_HALF_LOGPROB,
        }
    }

    /// Cycles through the script instead of failing when it runs out.
    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// A scorer with no script.
    pub fn scorer(per_token_logprob: f64) -> Self {
        Self {
            per_token_logprob,
            ..Self::new(Vec::<String>::new())
        }
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().expect("mock cursor")
    }

    fn next(&self) -> Result<String, BackendError> {
        let mut c = self.cursor.lock().expect("mock cursor");
        let n = self.script.len();
        let i = if self.repeat && n > 0 { *c % n } else { *c };
        let out = self.script.get(i).cloned().ok_or(BackendError::ScriptExhausted(n))?;
        *c += 1;
        Ok(out)
    }
}

impl PerceptionModel for MockBackend {
    fn describe(&self, _prompt: &str, _obs: &Observation) -> Result<String, BackendError> {
        self.next()
    }

    fn answer(&self, _question: &Question, _obs: &Observation) -> Result<String, BackendError> {
        self.next()
    }

    fn id(&self) -> &str {
        &self.id
    }
}

impl ReasoningModel for MockBackend {
    fn complete(&self, _prompt: &str) -> Result<String, BackendError> {
        self.next()
    }

    fn id(&self) -> &str {
        &self.id
    }
}

impl ScoringModel for MockBackend {
    fn token_logprobs(&self, _context: &str, continuation: &str) -> Result<Vec<f64>, BackendError> {
        let n = continuation.split_whitespace().count();
        if n == 0 {
            return Err(BackendError::EmptyContinuation);
        }
        Ok(vec![self.per_token_logprob; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_in_order_then_exhausted() {
        let m = MockBackend::new(["A", "B"]);
        assert_eq!(m.complete("x").unwrap(), "A");
        assert_eq!(m.complete("x").unwrap(), "B");
        assert_eq!(m.complete("x"), Err(BackendError::ScriptExhausted(2)));
    }

    #[test]
    fn repeating_cycles() {
        let m = MockBackend::new(["A", "B"]).repeating();
        let got: Vec<String> = (0..5).map(|_| m.complete("").unwrap()).collect();
        assert_eq!(got, ["A", "B", "A", "B", "A"]);
    }

    #[test]
    fn uniform_half_scorer() {
        let m = MockBackend::scorer(MOCK_HALF_LOGPROB);
        let lp = m.token_logprobs("ctx", "go to table").unwrap();
        assert_eq!(lp.len(), 3);
        let sum: f64 = lp.iter().sum();
        assert!((sum - (-2.0794415416798357)).abs() < 1e-12);
        assert!((sum.exp() - 0.125).abs() < 1e-12);
        assert_eq!(m.token_logprobs("ctx", "  "), Err(BackendError::EmptyContinuation));
    }
}
