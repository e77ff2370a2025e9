//! Micro-averaged Ent / Rel / Rel+ scoring.
//!
//! * Ent: `(sample, start, end, entity type)`
//! * Rel: `(sample, subject span, object span, relation type)`
//! * Rel+: a Rel match whose subject and object entity types are also right
//!
//! Predictions are deduplicated per sample before counting. With
//! `symmetric_swap` on, Compare and Conjunction triples also match with
//! their endpoints swapped.
//!
//! Prediction files are JSONL, one record per sample:
//!
//! ```text
//! {"id": "doc#0",
//!  "entities": [{"start": 0, "end": 2, "type": "Method"}],
//!  "relations": [{"subject": [0, 2], "object": [5, 6], "type": "Used-for",
//!                 "subject_type": "Method", "object_type": "Task"}]}
//! ```
//!
//! Spans are token offsets, end-exclusive. The `_type` fields are optional;
//! when absent, Rel+ takes the type of the predicted entity with that span.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityMention, EntityType, RelationType, Sample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction for unknown sample id {0}")]
    UnknownId(String),
    #[error("duplicate prediction record for sample id {0}")]
    DuplicateId(String),
    #[error("sample {id}: span {start}..{end} outside 0..{len}")]
    SpanOutOfBounds {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("prediction file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictedRelation {
    pub subject: (usize, usize),
    pub object: (usize, usize),
    #[serde(rename = "type")]
    pub label: RelationType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_type: Option<EntityType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_type: Option<EntityType>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub relations: Vec<PredictedRelation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet {
    pub samples: Vec<SamplePrediction>,
}

impl PredictionSet {
    /// Predictions identical to the gold annotations, types included.
    pub fn from_gold(gold: &[Sample]) -> Self {
        let samples = gold
            .iter()
            .map(|s| SamplePrediction {
                id: s.id.clone(),
                entities: s.entities.clone(),
                relations: s
                    .relations
                    .iter()
                    .map(|r| {
                        let (a, b) = (s.entities[r.subject], s.entities[r.object]);
                        PredictedRelation {
                            subject: (a.start, a.end),
                            object: (b.start, b.end),
                            label: r.label,
                            subject_type: Some(a.label),
                            object_type: Some(b.label),
                        }
                    })
                    .collect(),
            })
            .collect();
        PredictionSet { samples }
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, EvalError> {
        let mut samples = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| EvalError::Malformed {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(
                serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                    line: n + 1,
                    message: e.to_string(),
                })?,
            );
        }
        Ok(PredictionSet { samples })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let f = File::open(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        PredictionSet::read(BufReader::new(f))
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for s in &self.samples {
            writeln!(
                out,
                "{}",
                serde_json::to_string(s).expect("prediction serializes")
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Counts {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub ent: Counts,
    pub rel: Counts,
    #[serde(rename = "rel+")]
    pub rel_plus: Counts,
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<5} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "", "tp", "fp", "fn", "P", "R", "F1"
        )?;
        for (name, c) in [
            ("Ent", self.ent),
            ("Rel", self.rel),
            ("Rel+", self.rel_plus),
        ] {
            writeln!(
                f,
                "{:<5} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                name, c.tp, c.fp, c.fn_, c.precision, c.recall, c.f1
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub symmetric_swap: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            symmetric_swap: true,
        }
    }
}

type Span = (usize, usize);
type EntKey = (usize, usize, usize, EntityType);
type RelKey = (usize, Span, Span, RelationType);
type RelPlusKey = (RelKey, Option<EntityType>, Option<EntityType>);

fn rel_keys(
    sample: usize,
    subj: (Span, Option<EntityType>),
    obj: (Span, Option<EntityType>),
    label: RelationType,
    opts: ScoreOptions,
) -> (RelKey, RelPlusKey) {
    let (a, b) = if opts.symmetric_swap && label.is_symmetric() && obj.0 < subj.0 {
        (obj, subj)
    } else {
        (subj, obj)
    };
    let rel = (sample, a.0, b.0, label);
    (rel, (rel, a.1, b.1))
}

fn tally<T: Ord>(gold: &BTreeSet<T>, pred: &BTreeSet<T>) -> Counts {
    let tp = gold.intersection(pred).count();
    Counts::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// Scores `pred` against `gold`. Gold samples without a prediction record
/// count as predicting nothing.
pub fn score(
    gold: &[Sample],
    pred: &PredictionSet,
    opts: ScoreOptions,
) -> Result<ScoreReport, EvalError> {
    let index: HashMap<&str, usize> = gold
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let mut g_ent = BTreeSet::<EntKey>::new();
    let mut g_rel = BTreeSet::<RelKey>::new();
    let mut g_plus = BTreeSet::<RelPlusKey>::new();
    for (i, s) in gold.iter().enumerate() {
        g_ent.extend(s.entities.iter().map(|e| (i, e.start, e.end, e.label)));
        for r in &s.relations {
            let (a, b) = (s.entities[r.subject], s.entities[r.object]);
            let (rel, plus) = rel_keys(
                i,
                ((a.start, a.end), Some(a.label)),
                ((b.start, b.end), Some(b.label)),
                r.label,
                opts,
            );
            g_rel.insert(rel);
            g_plus.insert(plus);
        }
    }

    let mut p_ent = BTreeSet::<EntKey>::new();
    let mut p_rel = BTreeSet::<RelKey>::new();
    let mut p_plus = BTreeSet::<RelPlusKey>::new();
    let mut seen = HashSet::new();
    for p in &pred.samples {
        let i = *index
            .get(p.id.as_str())
            .ok_or_else(|| EvalError::UnknownId(p.id.clone()))?;
        if !seen.insert(i) {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
        let len = gold[i].tokens.len();
        let check = |(start, end): Span| {
            if start < end && end <= len {
                Ok(())
            } else {
                Err(EvalError::SpanOutOfBounds {
                    id: p.id.clone(),
                    start,
                    end,
                    len,
                })
            }
        };
        let mut span_type = HashMap::new();
        for e in &p.entities {
            check((e.start, e.end))?;
            span_type.entry((e.start, e.end)).or_insert(e.label);
            p_ent.insert((i, e.start, e.end, e.label));
        }
        for r in &p.relations {
            check(r.subject)?;
            check(r.object)?;
            let st = r
                .subject_type
                .or_else(|| span_type.get(&r.subject).copied());
            let ot = r.object_type.or_else(|| span_type.get(&r.object).copied());
            let (rel, plus) = rel_keys(i, (r.subject, st), (r.object, ot), r.label, opts);
            p_rel.insert(rel);
            if st.is_some() && ot.is_some() {
                p_plus.insert(plus);
            } else {
                // untyped: can never match, still counts as a prediction
                p_plus.insert((rel, None, None));
            }
        }
    }

    Ok(ScoreReport {
        ent: tally(&g_ent, &p_ent),
        rel: tally(&g_rel, &p_rel),
        rel_plus: tally(&g_plus, &p_plus),
    })
}
