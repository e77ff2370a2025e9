//! Post-processing of completions: bracket parsing, re-tokenization,
//! entity realignment and defect classification.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityMention, RelationMention, Sample};
use crate::promptkit::{GenerateInput, SENTINEL};
use crate::Method;

/// Why a completion was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    UnbalancedBrackets,
    NestedBrackets,
    EntitySetMismatch,
    MissingEntity,
    ExtraEntity,
    SentinelOutput,
    EmptyOutput,
}

impl DefectClass {
    pub const ALL: [DefectClass; 7] = [
        DefectClass::UnbalancedBrackets,
        DefectClass::NestedBrackets,
        DefectClass::EntitySetMismatch,
        DefectClass::MissingEntity,
        DefectClass::ExtraEntity,
        DefectClass::SentinelOutput,
        DefectClass::EmptyOutput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectClass::UnbalancedBrackets => "unbalanced_brackets",
            DefectClass::NestedBrackets => "nested_brackets",
            DefectClass::EntitySetMismatch => "entity_set_mismatch",
            DefectClass::MissingEntity => "missing_entity",
            DefectClass::ExtraEntity => "extra_entity",
            DefectClass::SentinelOutput => "sentinel_output",
            DefectClass::EmptyOutput => "empty_output",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Completion text with brackets removed and the bracketed regions as byte
/// ranges into `plain_text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub plain_text: String,
    pub bracketed_spans: Vec<(usize, usize)>,
}

impl ParsedCompletion {
    pub fn span_text(&self, i: usize) -> &str {
        let (s, e) = self.bracketed_spans[i];
        &self.plain_text[s..e]
    }

    pub fn is_sentinel(&self) -> bool {
        self.bracketed_spans.is_empty() && collapse_ws(&self.plain_text) == SENTINEL
    }
}

/// A synthesized sample and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoSample {
    #[serde(flatten)]
    pub sample: Sample,
    pub method: Method,
    pub origin_id: String,
    pub attempts: u32,
}

fn strip_wrapping_quotes(text: &str) -> &str {
    let t = text.trim();
    for q in ['\'', '"'] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            return t[1..t.len() - 1].trim();
        }
    }
    t
}

/// Single left-to-right scan. `[` opens and `]` closes a span; depth above
/// one in an otherwise balanced text is `nested_brackets`, any other
/// imbalance is `unbalanced_brackets`.
pub fn parse_bracketed(text: &str) -> Result<ParsedCompletion, DefectClass> {
    let text = strip_wrapping_quotes(text);
    if text.is_empty() {
        return Err(DefectClass::EmptyOutput);
    }
    let mut plain = String::with_capacity(text.len());
    let mut spans = Vec::new();
    let mut depth: i32 = 0;
    let mut max_depth = 0;
    let mut went_negative = false;
    let mut open_at = 0;
    for c in text.chars() {
        match c {
            '[' => {
                depth += 1;
                max_depth = max_depth.max(depth);
                if depth == 1 {
                    open_at = plain.len();
                }
            }
            ']' => {
                depth -= 1;
                if depth < 0 {
                    went_negative = true;
                    depth = 0;
                } else if depth == 0 {
                    spans.push((open_at, plain.len()));
                }
            }
            c => plain.push(c),
        }
    }
    if went_negative || depth != 0 {
        return Err(DefectClass::UnbalancedBrackets);
    }
    if max_depth > 1 {
        return Err(DefectClass::NestedBrackets);
    }
    Ok(ParsedCompletion {
        plain_text: plain,
        bracketed_spans: spans,
    })
}

/// Characters split off the edges of whitespace-delimited chunks.
pub const EDGE_PUNCT: [char; 10] = ['.', ',', ';', ':', '!', '?', '(', ')', '"', '\''];

const CLITICS: [&str; 7] = ["s", "re", "ve", "ll", "d", "m", "t"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Whitespace split, then edge punctuation peeled into single-character
/// tokens. Offsets are byte offsets into `text`.
///
/// Chunks made only of punctuation stay whole (`...`, `''`), a leading
/// apostrophe before a clitic stays attached (`'s`), and a trailing period
/// after a letter stays when the rest of the chunk already contains
/// one (`e.g.`, `U.S.`).
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chunk_start = None;
    for (i, c) in text
        .char_indices()
        .chain(std::iter::once((text.len(), ' ')))
    {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                split_chunk(text, s, i, &mut tokens);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    tokens
}

fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let push = |out: &mut Vec<Token>, s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_string(),
            start: s,
            end: e,
        })
    };
    let chunk = &text[start..end];
    if chunk.chars().all(|c| EDGE_PUNCT.contains(&c)) {
        push(out, start, end);
        return;
    }
    let mut lo = start;
    let mut hi = end;
    while let Some(c) = text[lo..hi].chars().next() {
        if !EDGE_PUNCT.contains(&c) {
            break;
        }
        let rest = text[lo + 1..hi].trim_end_matches(EDGE_PUNCT);
        if c == '\'' && CLITICS.iter().any(|k| rest.eq_ignore_ascii_case(k)) {
            break;
        }
        push(out, lo, lo + 1);
        lo += 1;
    }
    let mut trailing = Vec::new();
    while let Some(c) = text[lo..hi].chars().next_back() {
        if !EDGE_PUNCT.contains(&c) || hi - lo <= 1 {
            break;
        }
        let rest = &text[lo..hi - 1];
        if c == '.' && rest.ends_with(char::is_alphabetic) && rest.contains('.') {
            break;
        }
        trailing.push((hi - 1, hi));
        hi -= 1;
    }
    push(out, lo, hi);
    for (s, e) in trailing.into_iter().rev() {
        push(out, s, e);
    }
}

/// Tokenizes and then splits any token that straddles one of `boundaries`.
fn tokenize_with_boundaries(text: &str, boundaries: &[usize]) -> Vec<Token> {
    let mut out = Vec::new();
    for tok in tokenize_with_offsets(text) {
        let mut cuts: Vec<usize> = boundaries
            .iter()
            .copied()
            .filter(|&b| b > tok.start && b < tok.end)
            .collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut s = tok.start;
        for c in cuts.into_iter().chain(std::iter::once(tok.end)) {
            out.push(Token {
                text: text[s..c].to_string(),
                start: s,
                end: c,
            });
            s = c;
        }
    }
    out
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Surface used for entity matching: the text re-tokenized and joined with
/// single spaces, so `(IE)` and `( IE )` compare equal.
pub fn normalize_surface(s: &str) -> String {
    tokenize_with_offsets(s)
        .into_iter()
        .map(|t| t.text)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Compares bracketed surfaces against the expected multiset. On success
/// returns, for each bracketed span, the index into `expected` it takes,
/// assigning repeated surfaces in reading order.
fn assign(found: &[String], expected: &[String]) -> Result<Vec<usize>, DefectClass> {
    let mut pool: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in expected.iter().enumerate().rev() {
        pool.entry(s.as_str()).or_default().push(i);
    }
    let mut assignment = Vec::with_capacity(found.len());
    let mut unmatched = 0;
    for s in found {
        match pool.get_mut(s.as_str()).and_then(|v| v.pop()) {
            Some(i) => assignment.push(i),
            None => unmatched += 1,
        }
    }
    let leftover: usize = pool.values().map(Vec::len).sum();
    match (unmatched, leftover) {
        (0, 0) => Ok(assignment),
        (0, _) => Err(DefectClass::MissingEntity),
        (_, 0) => Err(DefectClass::ExtraEntity),
        _ => Err(DefectClass::EntitySetMismatch),
    }
}

/// Tokens of `pc` plus the token span of each bracketed region.
fn realign_tokens(pc: &ParsedCompletion) -> (Vec<String>, Vec<(usize, usize)>) {
    // trim whitespace inside the brackets so boundaries sit on token edges
    let trimmed: Vec<(usize, usize)> = pc
        .bracketed_spans
        .iter()
        .map(|&(s, e)| {
            let inner = &pc.plain_text[s..e];
            let lead = inner.len() - inner.trim_start().len();
            let trail = inner.len() - inner.trim_end().len();
            if lead == inner.len() {
                (s, s)
            } else {
                (s + lead, e - trail)
            }
        })
        .collect();
    let boundaries: Vec<usize> = trimmed.iter().flat_map(|&(s, e)| [s, e]).collect();
    let tokens = tokenize_with_boundaries(&pc.plain_text, &boundaries);
    let spans = trimmed
        .iter()
        .map(|&(cs, ce)| {
            let start = tokens
                .iter()
                .position(|t| t.start >= cs)
                .unwrap_or(tokens.len());
            let end = tokens
                .iter()
                .rposition(|t| t.end <= ce)
                .map_or(0, |i| i + 1)
                .max(start);
            (start, end)
        })
        .collect();
    (tokens.into_iter().map(|t| t.text).collect(), spans)
}

/// Turns a paraphrase completion into a pseudo-sample carrying the origin's
/// labels. The bracketed surfaces must equal the origin's entity surfaces as
/// a multiset; entity order may change.
pub fn realign_paraphrase(
    pc: &ParsedCompletion,
    origin: &Sample,
) -> Result<PseudoSample, DefectClass> {
    if pc.is_sentinel() {
        return Err(DefectClass::SentinelOutput);
    }
    let found: Vec<String> = (0..pc.bracketed_spans.len())
        .map(|i| normalize_surface(pc.span_text(i)))
        .collect();
    let expected: Vec<String> = origin
        .surfaces()
        .iter()
        .map(|s| normalize_surface(s))
        .collect();
    let assignment = assign(&found, &expected)?;

    let (tokens, spans) = realign_tokens(pc);
    if tokens.is_empty() {
        return Err(DefectClass::EmptyOutput);
    }
    let mut origin_to_new = vec![0; origin.entities.len()];
    let mut entities = Vec::with_capacity(spans.len());
    for (new_idx, (&(start, end), &orig_idx)) in spans.iter().zip(&assignment).enumerate() {
        if start >= end {
            return Err(DefectClass::EntitySetMismatch);
        }
        origin_to_new[orig_idx] = new_idx;
        entities.push(EntityMention::new(
            start,
            end,
            origin.entities[orig_idx].label,
        ));
    }
    let relations = origin
        .relations
        .iter()
        .map(|r| RelationMention::new(origin_to_new[r.subject], origin_to_new[r.object], r.label))
        .collect();
    let sample = Sample {
        id: origin.id.clone(),
        tokens,
        entities,
        relations,
    };
    sample
        .validate()
        .map_err(|_| DefectClass::EntitySetMismatch)?;
    Ok(PseudoSample {
        sample,
        method: Method::Paraphrase,
        origin_id: origin.id.clone(),
        attempts: 1,
    })
}

/// Turns a generate completion into a pseudo-sample. Every listed entity
/// surface must be bracketed exactly once. `Ok(None)` is the benign case of
/// an empty input answered with the sentinel.
pub fn realign_generated(
    pc: &ParsedCompletion,
    input: &GenerateInput,
) -> Result<Option<PseudoSample>, DefectClass> {
    if pc.is_sentinel() {
        return if input.is_empty() {
            Ok(None)
        } else {
            Err(DefectClass::SentinelOutput)
        };
    }
    let found: Vec<String> = (0..pc.bracketed_spans.len())
        .map(|i| normalize_surface(pc.span_text(i)))
        .collect();
    let expected: Vec<String> = input
        .entities
        .iter()
        .map(|(s, _)| normalize_surface(s))
        .collect();
    let assignment = assign(&found, &expected)?;

    let (tokens, spans) = realign_tokens(pc);
    if tokens.is_empty() {
        return Err(DefectClass::EmptyOutput);
    }
    let mut input_to_new = vec![0; input.entities.len()];
    let mut entities = Vec::with_capacity(spans.len());
    for (new_idx, (&(start, end), &in_idx)) in spans.iter().zip(&assignment).enumerate() {
        if start >= end {
            return Err(DefectClass::EntitySetMismatch);
        }
        input_to_new[in_idx] = new_idx;
        entities.push(EntityMention::new(start, end, input.entities[in_idx].1));
    }
    let lookup = |surface: &str, exclude: Option<usize>| {
        input
            .entities
            .iter()
            .enumerate()
            .find(|(i, (s, _))| s == surface && Some(input_to_new[*i]) != exclude)
            .map(|(i, _)| input_to_new[i])
    };
    let mut relations = Vec::with_capacity(input.relations.len());
    for (subj, label, obj) in &input.relations {
        let s = lookup(subj, None).ok_or(DefectClass::EntitySetMismatch)?;
        let o = lookup(obj, Some(s)).ok_or(DefectClass::EntitySetMismatch)?;
        relations.push(RelationMention::new(s, o, *label));
    }
    let sample = Sample {
        id: input.origin_id.clone(),
        tokens,
        entities,
        relations,
    };
    sample
        .validate()
        .map_err(|_| DefectClass::EntitySetMismatch)?;
    Ok(Some(PseudoSample {
        sample,
        method: Method::Generate,
        origin_id: input.origin_id.clone(),
        attempts: 1,
    }))
}

/// One line of the defect audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectLogEntry {
    pub origin_id: String,
    pub method: Method,
    pub attempt: u32,
    pub defect: DefectClass,
    /// Benign entries (sentinel answer to an empty input) are logged but do
    /// not count towards the defect rate.
    pub benign: bool,
    pub completion_digest: String,
}
