//! Prompt templates with named `{slot}` placeholders.
//!
//! `{{` and `}}` render as literal braces. Defaults are compiled in from the
//! `templates/` directory; [`PromptTemplates::load_dir`] reads overrides
//! from disk, one UTF-8 file per prompt.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;

use crate::types::QaPair;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{name}` is missing slot value `{slot}`")]
    MissingSlot { name: String, slot: String },
    #[error("template `{name}` has an unterminated placeholder")]
    Unterminated { name: String },
    #[error("reading template `{name}`: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Slot(String),
}

/// A parsed template.
#[derive(Debug, Clone)]
pub struct Template {
    name: String,
    source: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    lit.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    lit.push('}');
                }
                '{' => {
                    let mut slot = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) => slot.push(ch),
                            None => {
                                return Err(TemplateError::Unterminated { name: name.into() })
                            }
                        }
                    }
                    if !lit.is_empty() {
                        pieces.push(Piece::Lit(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Slot(slot));
                }
                _ => lit.push(c),
            }
        }
        if !lit.is_empty() {
            pieces.push(Piece::Lit(lit));
        }
        Ok(Self {
            name: name.into(),
            source: source.into(),
            pieces,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The raw template text, placeholders included.
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Lit(_) => None,
        })
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len() + 64);
        for p in &self.pieces {
            match p {
                Piece::Lit(l) => out.push_str(l),
                Piece::Slot(s) => {
                    let v = values.iter().find(|(k, _)| k == s).ok_or_else(|| {
                        TemplateError::MissingSlot {
                            name: self.name.clone(),
                            slot: s.clone(),
                        }
                    })?;
                    out.push_str(v.1);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render): recovers slot values from a
    /// rendered prompt, or `None` if the text was not produced by this
    /// template.
    pub fn extract(&self, rendered: &str) -> Option<BTreeMap<String, String>> {
        let mut pattern = String::from("(?s)^");
        let mut names = Vec::new();
        for p in &self.pieces {
            match p {
                Piece::Lit(l) => pattern.push_str(&regex::escape(l)),
                Piece::Slot(s) => {
                    pattern.push_str("(.*?)");
                    names.push(s.clone());
                }
            }
        }
        pattern.push('$');
        let re = Regex::new(&pattern).ok()?;
        let caps = re.captures(rendered)?;
        Some(
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n, caps.get(i + 1).map_or("", |m| m.as_str()).to_string()))
                .collect(),
        )
    }
}

/// The six prompts used by the pipeline and its baselines.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    pub initial_description: Template,
    pub question_generation: Template,
    pub vqa: Template,
    pub refinement: Template,
    pub goal_aware: Template,
    pub judge: Template,
}

pub const TEMPLATE_FILES: [&str; 6] = [
    "initial_description",
    "question_generation",
    "vqa",
    "refinement",
    "goal_aware",
    "judge",
];

const DEFAULT_SOURCES: [&str; 6] = [
    include_str!("../templates/initial_description.txt"),
    include_str!("../templates/question_generation.txt"),
    include_str!("../templates/vqa.txt"),
    include_str!("../templates/refinement.txt"),
    include_str!("../templates/goal_aware.txt"),
    include_str!("../templates/judge.txt"),
];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_sources(DEFAULT_SOURCES.map(str::to_string))
            .expect("built-in templates parse")
    }
}

impl PromptTemplates {
    fn from_sources(src: [String; 6]) -> Result<Self, TemplateError> {
        let t = |i: usize| Template::parse(TEMPLATE_FILES[i], &src[i]);
        Ok(Self {
            initial_description: t(0)?,
            question_generation: t(1)?,
            vqa: t(2)?,
            refinement: t(3)?,
            goal_aware: t(4)?,
            judge: t(5)?,
        })
    }

    /// Loads `<name>.txt` for every prompt; missing files fall back to the
    /// built-in default.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut src = DEFAULT_SOURCES.map(str::to_string);
        for (i, name) in TEMPLATE_FILES.iter().enumerate() {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                src[i] = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    name: name.to_string(),
                    source,
                })?;
            }
        }
        Self::from_sources(src)
    }

    /// The constant goal-agnostic description prompt.
    pub fn initial_prompt(&self) -> String {
        self.initial_description
            .render(&[])
            .expect("initial description has no slots")
    }

    pub fn render_question_generation(&self, d_i: &str, goal: &str) -> Result<String, TemplateError> {
        self.question_generation.render(&[("d_i", d_i), ("goal", goal)])
    }

    pub fn render_vqa(&self, question: &str) -> Result<String, TemplateError> {
        self.vqa.render(&[("question", question)])
    }

    pub fn render_refinement(&self, d_i: &str, qa: &[QaPair]) -> Result<String, TemplateError> {
        let pairs = render_qa_list(qa);
        self.refinement.render(&[("d_i", d_i), ("qa_pairs", &pairs)])
    }

    pub fn render_goal_aware(&self, goal: &str) -> Result<String, TemplateError> {
        self.goal_aware.render(&[("goal", goal)])
    }

    pub fn render_judge(
        &self,
        gt: &str,
        text_a: &str,
        text_b: &str,
        text_c: &str,
    ) -> Result<String, TemplateError> {
        self.judge.render(&[
            ("gt", gt),
            ("text_a", text_a),
            ("text_b", text_b),
            ("text_c", text_c),
        ])
    }
}

/// Python-repr style string literal: single quotes unless the text contains
/// a single quote and no double quote.
pub fn py_repr(s: &str) -> String {
    let use_double = s.contains('\'') && !s.contains('"');
    let q = if use_double { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(q);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == q => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(q);
    out
}

/// `[('q1', 'a1'), ('q2', 'a2')]`
pub fn render_qa_list(qa: &[QaPair]) -> String {
    let inner: Vec<String> = qa
        .iter()
        .map(|p| format!("({}, {})", py_repr(&p.question.text), py_repr(&p.answer)))
        .collect();
    format!("[{}]", inner.join(", "))
}

/// Appended to the question prompt on the single reformat retry.
pub const RETRY_SUFFIX: &str = "\nOutput only the JSON dictionary";

fn parse_py_str(chars: &mut std::iter::Peekable<std::str::Chars<'_>>) -> Option<String> {
    let q = chars.next().filter(|c| *c == '\'' || *c == '"')?;
    let mut out = String::new();
    loop {
        match chars.next()? {
            '\\' => match chars.next()? {
                'n' => out.push('\n'),
                c => out.push(c),
            },
            c if c == q => return Some(out),
            c => out.push(c),
        }
    }
}

/// Inverse of [`render_qa_list`]. `None` on malformed input.
pub fn parse_qa_list(s: &str) -> Option<Vec<(String, String)>> {
    let mut chars = s.trim().chars().peekable();
    let skip_ws = |c: &mut std::iter::Peekable<std::str::Chars<'_>>| {
        while c.peek().is_some_and(|x| x.is_whitespace()) {
            c.next();
        }
    };
    if chars.next()? != '[' {
        return None;
    }
    let mut out = Vec::new();
    loop {
        skip_ws(&mut chars);
        match chars.next()? {
            ']' => break,
            ',' => continue,
            '(' => {}
            _ => return None,
        }
        skip_ws(&mut chars);
        let q = parse_py_str(&mut chars)?;
        skip_ws(&mut chars);
        if chars.next()? != ',' {
            return None;
        }
        skip_ws(&mut chars);
        let a = parse_py_str(&mut chars)?;
        skip_ws(&mut chars);
        if chars.next()? != ')' {
            return None;
        }
        out.push((q, a));
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Question;

    #[test]
    fn qa_list_round_trips() {
        let qa = vec![
            QaPair::new(Question::new("question1", "Do you see an egg?"), "Yes, it's here."),
            QaPair::new(Question::new("question2", "Do you see a \"cd\"?"), "No\\n 'x'"),
        ];
        let parsed = parse_qa_list(&render_qa_list(&qa)).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0], ("Do you see an egg?".into(), "Yes, it's here.".into()));
        assert_eq!(parsed[1].1, "No\\n 'x'");
        assert_eq!(parse_qa_list("[]").unwrap(), vec![]);
        assert!(parse_qa_list("nope").is_none());
    }

    #[test]
    fn braces_escape_and_slots() {
        let t = Template::parse("t", "a {x} {{lit}} b").unwrap();
        assert_eq!(t.render(&[("x", "1")]).unwrap(), "a 1 {lit} b");
        assert!(t.render(&[]).is_err());
    }

    #[test]
    fn extract_inverts_render() {
        let tpl = PromptTemplates::default();
        let p = tpl
            .render_question_generation("a table with {braces}", "heat some egg")
            .unwrap();
        let got = tpl.question_generation.extract(&p).unwrap();
        assert_eq!(got["d_i"], "a table with {braces}");
        assert_eq!(got["goal"], "heat some egg");
        assert!(tpl.refinement.extract(&p).is_none());
    }

    #[test]
    fn qa_list_matches_python_repr() {
        let qa = vec![QaPair {
            question: Question::new("question1", "Do you see an egg?"),
            answer: "Yes, it's there.".into(),
        }];
        assert_eq!(
            render_qa_list(&qa),
            "[('Do you see an egg?', \"Yes, it's there.\")]"
        );
        assert_eq!(render_qa_list(&[]), "[]");
    }

    #[test]
    fn defaults_have_expected_slots() {
        let t = PromptTemplates::default();
        assert_eq!(t.initial_prompt(), "Describe the scene in detail\n");
        assert_eq!(t.question_generation.slots().collect::<Vec<_>>(), ["d_i", "goal"]);
        assert_eq!(t.judge.slots().count(), 4);
    }

    #[test]
    fn load_dir_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("vqa.txt"), "Q: {question}").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.render_vqa("x?").unwrap(), "Q: x?");
        assert_eq!(t.initial_prompt(), "Describe the scene in detail\n");
    }
}
