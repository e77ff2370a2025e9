//! Prompt construction: bracketed sentence rendering and the paraphrase and
//! generate prompt families.
//!
//! Templates are plain text resources under `templates/` with a single
//! `{{sample}}` slot.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityType, RelationType, Sample};
use crate::Method;

pub const SLOT: &str = "{{sample}}";

/// Fixed answer the generate prompt asks for when no entities are given.
pub const SENTINEL: &str = "No result can be generated with the given information.";

const PARAPHRASE_TEMPLATE: &str = include_str!("../templates/paraphrase.txt");
const GENERATE_TEMPLATE: &str = include_str!("../templates/generate.txt");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("sample `{id}` has overlapping entity spans and cannot be bracketed")]
    Overlap { id: String },
    #[error("sample `{id}` has a token containing a square bracket")]
    BracketInToken { id: String },
    #[error("relation references unknown entity surface `{0}`")]
    UnknownSurface(String),
}

/// A template with exactly one `{{sample}}` slot.
#[derive(Debug, Clone, Copy)]
pub struct Template {
    before: &'static str,
    after: &'static str,
}

impl Template {
    fn parse(raw: &'static str) -> Template {
        let raw = raw.strip_suffix('\n').unwrap_or(raw);
        let (before, after) = raw
            .split_once(SLOT)
            .expect("template resource must contain the sample slot");
        debug_assert!(!after.contains(SLOT));
        Template { before, after }
    }

    pub fn paraphrase() -> Template {
        Template::parse(PARAPHRASE_TEMPLATE)
    }

    pub fn generate() -> Template {
        Template::parse(GENERATE_TEMPLATE)
    }

    pub fn for_method(method: Method) -> Template {
        match method {
            Method::Paraphrase => Template::paraphrase(),
            Method::Generate => Template::generate(),
        }
    }

    /// Text before the slot.
    pub fn prefix(&self) -> &'static str {
        self.before
    }

    /// Text after the slot.
    pub fn suffix(&self) -> &'static str {
        self.after
    }

    pub fn fill(&self, sample: &str) -> String {
        let mut out = String::with_capacity(self.before.len() + sample.len() + self.after.len());
        out.push_str(self.before);
        out.push_str(sample);
        out.push_str(self.after);
        out
    }

    /// Recovers the slot content of a prompt built from this template.
    pub fn extract<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        prompt
            .strip_prefix(self.before)
            .and_then(|rest| rest.strip_suffix(self.after))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BracketedText(pub String);

impl BracketedText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub kind: Method,
    pub origin_sample_id: String,
}

/// Single characters written directly after the preceding token, without a
/// space. `postproc::tokenize_with_offsets` splits them off again.
pub const ATTACH_LEFT: [char; 7] = ['.', ',', ';', ':', '!', '?', ')'];

fn attaches_left(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if ATTACH_LEFT.contains(&c))
}

/// Joins tokens with single spaces, except that single closing punctuation
/// tokens attach to the previous token and nothing follows an opening `(`
/// with a space.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    render_with_brackets(tokens, &[])
}

/// `spans` must be sorted and non-overlapping, half-open token ranges.
fn render_with_brackets<S: AsRef<str>>(tokens: &[S], spans: &[(usize, usize)]) -> String {
    let mut out = String::new();
    let mut starts = spans.iter().map(|s| s.0).peekable();
    let mut ends = spans.iter().map(|s| s.1).peekable();
    for (i, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        if i > 0 && !attaches_left(token) && tokens[i - 1].as_ref() != "(" {
            out.push(' ');
        }
        while starts.peek() == Some(&i) {
            starts.next();
            out.push('[');
        }
        out.push_str(token);
        while ends.peek() == Some(&(i + 1)) {
            ends.next();
            out.push(']');
        }
    }
    out
}

/// Renders the sentence with every entity wrapped in square brackets, types
/// omitted. Brackets are inserted by token position, so repeated surfaces
/// are each marked where they occur.
pub fn render_bracketed(sample: &Sample) -> Result<BracketedText, PromptError> {
    if sample.has_overlapping_entities() {
        return Err(PromptError::Overlap {
            id: sample.id.clone(),
        });
    }
    if sample.tokens.iter().any(|t| t.contains(['[', ']'])) {
        return Err(PromptError::BracketInToken {
            id: sample.id.clone(),
        });
    }
    let spans: Vec<(usize, usize)> = sample.entities.iter().map(|e| (e.start, e.end)).collect();
    Ok(BracketedText(render_with_brackets(&sample.tokens, &spans)))
}

pub fn build_paraphrase_prompt(sample: &Sample) -> Result<PromptText, PromptError> {
    let bracketed = render_bracketed(sample)?;
    Ok(PromptText {
        text: Template::paraphrase().fill(bracketed.as_str()),
        kind: Method::Paraphrase,
        origin_sample_id: sample.id.clone(),
    })
}

/// Label information of one sample: entity surfaces with types and
/// relations as surface triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateInput {
    pub origin_id: String,
    pub entities: Vec<(String, EntityType)>,
    pub relations: Vec<(String, RelationType, String)>,
}

impl GenerateInput {
    pub fn new(
        origin_id: impl Into<String>,
        entities: Vec<(String, EntityType)>,
        relations: Vec<(String, RelationType, String)>,
    ) -> Result<Self, PromptError> {
        let known: HashSet<&str> = entities.iter().map(|(s, _)| s.as_str()).collect();
        for (subj, _, obj) in &relations {
            for surface in [subj, obj] {
                if !known.contains(surface.as_str()) {
                    return Err(PromptError::UnknownSurface(surface.clone()));
                }
            }
        }
        Ok(GenerateInput {
            origin_id: origin_id.into(),
            entities,
            relations,
        })
    }

    /// Entity list deduplicated by (surface, type) and relation list
    /// deduplicated by surface triple, both in sample order. A pair that a
    /// relation links to another mention with the same surface and type is
    /// listed twice, so the relation keeps two distinct endpoints.
    pub fn from_sample(sample: &Sample) -> GenerateInput {
        let key = |i: usize| {
            (
                sample.surface(&sample.entities[i]),
                sample.entities[i].label,
            )
        };
        let twice: HashSet<(String, EntityType)> = sample
            .relations
            .iter()
            .filter(|r| key(r.subject) == key(r.object))
            .map(|r| key(r.subject))
            .collect();
        let mut seen: HashMap<(String, EntityType), usize> = HashMap::new();
        let entities: Vec<(String, EntityType)> = (0..sample.entities.len())
            .map(key)
            .filter(|pair| {
                let n = seen.entry(pair.clone()).or_insert(0);
                *n += 1;
                *n == 1 || (*n == 2 && twice.contains(pair))
            })
            .collect();
        let mut seen = HashSet::new();
        let relations = sample
            .relations
            .iter()
            .map(|r| {
                (
                    sample.surface(&sample.entities[r.subject]),
                    r.label,
                    sample.surface(&sample.entities[r.object]),
                )
            })
            .filter(|t| seen.insert(t.clone()))
            .collect();
        GenerateInput {
            origin_id: sample.id.clone(),
            entities,
            relations,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// The input record in the notation of the template demonstrations:
    /// `{'entities': [['x', {'type': 'Task'}]], 'relations': [['x', 'Used-for', 'y']]}`.
    pub fn render(&self) -> String {
        let entities: Vec<String> = self
            .entities
            .iter()
            .map(|(s, t)| format!("[{}, {{'type': {}}}]", py_str(s), py_str(t.as_str())))
            .collect();
        let relations: Vec<String> = self
            .relations
            .iter()
            .map(|(s, r, o)| format!("[{}, {}, {}]", py_str(s), py_str(r.as_str()), py_str(o)))
            .collect();
        format!(
            "{{'entities': [{}], 'relations': [{}]}}",
            entities.join(", "),
            relations.join(", ")
        )
    }
}

/// Python `repr` of a string: single quotes unless the text contains a
/// single quote and no double quote.
fn py_str(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

pub fn build_generate_prompt(input: &GenerateInput) -> PromptText {
    PromptText {
        text: Template::generate().fill(&input.render()),
        kind: Method::Generate,
        origin_sample_id: input.origin_id.clone(),
    }
}
