//! Joint entity/relation corpora: the sample data model, the SciERC
//! line-delimited document loader, and exporters for the backbone training
//! formats (`scierc`, `spert`, `marker`).
//!
//! Token spans are half-open (`start..end`) everywhere inside this crate.
//! SciERC stores document-level offsets with inclusive ends; the loader and
//! the document exporters convert at the boundary.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::IgnoredAny;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown entity type `{label}`")]
    UnknownEntityType { line: usize, label: String },
    #[error("line {line}: unknown relation type `{label}`")]
    UnknownRelationType { line: usize, label: String },
    #[error("line {line}: span [{start}, {end}] out of range: {message}")]
    SpanOutOfRange {
        line: usize,
        start: i64,
        end: i64,
        message: String,
    },
    #[error("sample `{id}`: {message}")]
    InvalidSample { id: String, message: String },
    #[error("duplicate document key `{0}`")]
    DuplicateDocKey(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// The six SciERC entity types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    Task,
    Method,
    Metric,
    Material,
    Generic,
    OtherScientificTerm,
}

impl EntityType {
    pub const ALL: [EntityType; 6] = [
        EntityType::Task,
        EntityType::Method,
        EntityType::Metric,
        EntityType::Material,
        EntityType::Generic,
        EntityType::OtherScientificTerm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Task => "Task",
            EntityType::Method => "Method",
            EntityType::Metric => "Metric",
            EntityType::Material => "Material",
            EntityType::Generic => "Generic",
            EntityType::OtherScientificTerm => "OtherScientificTerm",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Case-insensitive; SciERC releases differ in capitalisation.
impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

/// The seven SciERC relation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationType {
    #[serde(rename = "Used-for")]
    UsedFor,
    #[serde(rename = "Feature-of")]
    FeatureOf,
    #[serde(rename = "Hyponym-of")]
    HyponymOf,
    #[serde(rename = "Part-of")]
    PartOf,
    #[serde(rename = "Evaluate-for")]
    EvaluateFor,
    Compare,
    Conjunction,
}

impl RelationType {
    pub const ALL: [RelationType; 7] = [
        RelationType::UsedFor,
        RelationType::FeatureOf,
        RelationType::HyponymOf,
        RelationType::PartOf,
        RelationType::EvaluateFor,
        RelationType::Compare,
        RelationType::Conjunction,
    ];

    /// Label as written in prompts and spert files, e.g. `Used-for`.
    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::UsedFor => "Used-for",
            RelationType::FeatureOf => "Feature-of",
            RelationType::HyponymOf => "Hyponym-of",
            RelationType::PartOf => "Part-of",
            RelationType::EvaluateFor => "Evaluate-for",
            RelationType::Compare => "Compare",
            RelationType::Conjunction => "Conjunction",
        }
    }

    /// Label as written in SciERC document files, e.g. `USED-FOR`.
    pub fn document_label(self) -> &'static str {
        match self {
            RelationType::UsedFor => "USED-FOR",
            RelationType::FeatureOf => "FEATURE-OF",
            RelationType::HyponymOf => "HYPONYM-OF",
            RelationType::PartOf => "PART-OF",
            RelationType::EvaluateFor => "EVALUATE-FOR",
            RelationType::Compare => "COMPARE",
            RelationType::Conjunction => "CONJUNCTION",
        }
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, RelationType::Compare | RelationType::Conjunction)
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

/// A typed token span `start..end` within one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: EntityType,
}

impl EntityMention {
    pub fn new(start: usize, end: usize, label: EntityType) -> Self {
        EntityMention { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A directed relation between two entries of the sentence's entity list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationMention {
    pub subject: usize,
    pub object: usize,
    #[serde(rename = "type")]
    pub label: RelationType,
}

impl RelationMention {
    pub fn new(subject: usize, object: usize, label: RelationType) -> Self {
        RelationMention {
            subject,
            object,
            label,
        }
    }
}

/// One tokenized sentence with its entity and relation annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationMention>,
}

impl Sample {
    /// Builds a sample and checks every invariant.
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        entities: Vec<EntityMention>,
        relations: Vec<RelationMention>,
    ) -> Result<Self, CorpusError> {
        let sample = Sample {
            id: id.into(),
            tokens,
            entities,
            relations,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |message: String| {
            Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message,
            })
        };
        if let Some(i) = self.tokens.iter().position(|t| t.is_empty()) {
            return fail(format!("token {i} is empty"));
        }
        let n = self.tokens.len();
        let mut seen = HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            if e.start >= e.end || e.end > n {
                return fail(format!(
                    "entity {i} span {}..{} invalid for {n} tokens",
                    e.start, e.end
                ));
            }
            if !seen.insert((e.start, e.end, e.label)) {
                return fail(format!(
                    "duplicate entity {}..{} {}",
                    e.start, e.end, e.label
                ));
            }
        }
        if self
            .entities
            .windows(2)
            .any(|w| (w[0].start, w[0].end) > (w[1].start, w[1].end))
        {
            return fail("entities not ordered by (start, end)".into());
        }
        for (i, r) in self.relations.iter().enumerate() {
            let m = self.entities.len();
            if r.subject >= m || r.object >= m {
                return fail(format!("relation {i} references missing entity"));
            }
            if r.subject == r.object {
                return fail(format!("relation {i} has subject == object"));
            }
        }
        Ok(())
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn surface(&self, entity: &EntityMention) -> String {
        self.tokens[entity.start..entity.end].join(" ")
    }

    pub fn surfaces(&self) -> Vec<String> {
        self.entities.iter().map(|e| self.surface(e)).collect()
    }

    pub fn has_overlapping_entities(&self) -> bool {
        // entities are sorted by start, so any overlap shows up against the
        // furthest end seen so far
        let mut max_end = 0;
        for (i, e) in self.entities.iter().enumerate() {
            if i > 0 && e.start < max_end {
                return true;
            }
            max_end = max_end.max(e.end);
        }
        false
    }

    /// Whether the sample can be written as flat bracketed text: no
    /// overlapping entity spans and no token containing a square bracket.
    pub fn is_bracketable(&self) -> bool {
        !self.has_overlapping_entities() && !self.tokens.iter().any(|t| t.contains(['[', ']']))
    }

    /// Document key part of a `<doc_key>#<index>` id.
    pub fn doc_key(&self) -> &str {
        split_id(&self.id).0
    }
}

fn split_id(id: &str) -> (&str, Option<usize>) {
    match id.rsplit_once('#') {
        Some((key, idx)) => match idx.parse() {
            Ok(i) => (key, Some(i)),
            Err(_) => (id, None),
        },
        None => (id, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Pseudo,
}

impl Split {
    /// Guesses the split from a file name (`train.json`, `dev.json`, ...).
    pub fn infer(path: &Path) -> Split {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("dev") || stem.contains("valid") {
            Split::Dev
        } else if stem.contains("test") {
            Split::Test
        } else {
            Split::Pseudo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_key: String,
    pub sentences: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocumentSet {
    pub documents: Vec<Document>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub entity_count: usize,
    pub relation_count: usize,
    pub entity_type_count: usize,
    pub relation_type_count: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples: {}\nentities: {} ({} types)\nrelations: {} ({} types)",
            self.sample_count,
            self.entity_count,
            self.entity_type_count,
            self.relation_count,
            self.relation_type_count
        )
    }
}

pub fn compute_stats(samples: &[Sample]) -> DatasetStats {
    let mut entity_types = BTreeSet::new();
    let mut relation_types = BTreeSet::new();
    let mut stats = DatasetStats {
        sample_count: samples.len(),
        ..Default::default()
    };
    for s in samples {
        stats.entity_count += s.entities.len();
        stats.relation_count += s.relations.len();
        entity_types.extend(s.entities.iter().map(|e| e.label));
        relation_types.extend(s.relations.iter().map(|r| r.label));
    }
    stats.entity_type_count = entity_types.len();
    stats.relation_type_count = relation_types.len();
    stats
}

/// Samples in document order, then sentence order.
pub fn flatten(ds: &DocumentSet) -> Vec<Sample> {
    ds.documents
        .iter()
        .flat_map(|d| d.sentences.iter().cloned())
        .collect()
}

type NerTriple = (i64, i64, String);
type RelTuple = (i64, i64, i64, i64, String);

#[derive(Deserialize)]
struct SciercRecord {
    doc_key: String,
    sentences: Vec<Vec<String>>,
    #[serde(default)]
    ner: Option<Vec<Vec<NerTriple>>>,
    #[serde(default)]
    relations: Option<Vec<Vec<RelTuple>>>,
    #[serde(default)]
    #[allow(dead_code)]
    clusters: Option<IgnoredAny>,
}

pub fn load_scierc(path: &Path) -> Result<DocumentSet, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_scierc(BufReader::new(file), Split::infer(path))
}

/// Reads SciERC line-delimited documents. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn read_scierc<R: BufRead>(reader: R, split: Split) -> Result<DocumentSet, CorpusError> {
    let mut documents = Vec::new();
    let mut keys = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SciercRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !keys.insert(record.doc_key.clone()) {
            return Err(CorpusError::DuplicateDocKey(record.doc_key));
        }
        documents.push(convert_record(record, line_no)?);
    }
    Ok(DocumentSet { documents, split })
}

fn convert_record(record: SciercRecord, line: usize) -> Result<Document, CorpusError> {
    let n_sent = record.sentences.len();
    let ner = record.ner.unwrap_or_else(|| vec![Vec::new(); n_sent]);
    let relations = record.relations.unwrap_or_else(|| vec![Vec::new(); n_sent]);
    if ner.len() != n_sent || relations.len() != n_sent {
        return Err(CorpusError::Malformed {
            line,
            message: format!(
                "{} sentences but {} ner lists and {} relation lists",
                n_sent,
                ner.len(),
                relations.len()
            ),
        });
    }

    let mut sentences = Vec::with_capacity(n_sent);
    let mut offset: i64 = 0;
    for (idx, ((tokens, ner), rels)) in record
        .sentences
        .into_iter()
        .zip(ner)
        .zip(relations)
        .enumerate()
    {
        let len = tokens.len() as i64;
        let local = |start: i64, end: i64| -> Result<(usize, usize), CorpusError> {
            if start < offset || end < start || end >= offset + len {
                return Err(CorpusError::SpanOutOfRange {
                    line,
                    start,
                    end,
                    message: format!(
                        "sentence {idx} covers document tokens {offset}..{}",
                        offset + len
                    ),
                });
            }
            Ok(((start - offset) as usize, (end - offset + 1) as usize))
        };

        let mut entities = Vec::with_capacity(ner.len());
        for (start, end, label) in ner {
            let (s, e) = local(start, end)?;
            let label = label
                .parse::<EntityType>()
                .map_err(|label| CorpusError::UnknownEntityType { line, label })?;
            entities.push(EntityMention::new(s, e, label));
        }
        // stable, so same-span entities keep their file order
        entities.sort_by_key(|e| (e.start, e.end));

        let mut mentions = Vec::with_capacity(rels.len());
        for (ss, se, os, oe, label) in rels {
            let subj = local(ss, se)?;
            let obj = local(os, oe)?;
            let label = label
                .parse::<RelationType>()
                .map_err(|label| CorpusError::UnknownRelationType { line, label })?;
            let find = |span: (usize, usize), exclude: Option<usize>| {
                entities
                    .iter()
                    .enumerate()
                    .position(|(i, e)| (e.start, e.end) == span && Some(i) != exclude)
            };
            let subject = find(subj, None);
            let object = subject.and_then(|s| find(obj, Some(s)));
            match (subject, object) {
                (Some(subject), Some(object)) => {
                    mentions.push(RelationMention::new(subject, object, label))
                }
                _ => {
                    return Err(CorpusError::SpanOutOfRange {
                        line,
                        start: ss,
                        end: oe,
                        message: format!(
                            "relation endpoints in sentence {idx} do not match annotated entities"
                        ),
                    })
                }
            }
        }

        let sample = Sample::new(
            format!("{}#{}", record.doc_key, idx),
            tokens,
            entities,
            mentions,
        )
        .map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        sentences.push(sample);
        offset += len;
    }
    Ok(Document {
        doc_key: record.doc_key,
        sentences,
    })
}

/// Backbone training formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    /// SciERC documents: `doc_key`, `sentences`, `ner`, `relations`, `clusters`.
    Scierc,
    /// One JSON array of `{tokens, entities, relations, orig_id}` records.
    Spert,
    /// PL-Marker/PURE documents: SciERC layout without `clusters`.
    Marker,
}

impl ExportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ExportFormat::Scierc => "scierc.json",
            ExportFormat::Spert => "spert.json",
            ExportFormat::Marker => "marker.json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scierc" => Ok(ExportFormat::Scierc),
            "spert" => Ok(ExportFormat::Spert),
            "marker" => Ok(ExportFormat::Marker),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

type DocRelation = (usize, usize, usize, usize, &'static str);

#[derive(Serialize)]
struct SciercOut<'a> {
    doc_key: &'a str,
    sentences: Vec<&'a [String]>,
    ner: Vec<Vec<(usize, usize, &'static str)>>,
    relations: Vec<Vec<DocRelation>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clusters: Option<[(); 0]>,
}

#[derive(Serialize, Deserialize)]
struct SpertEntity {
    #[serde(rename = "type")]
    label: EntityType,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct SpertRelation {
    #[serde(rename = "type")]
    label: RelationType,
    head: usize,
    tail: usize,
}

#[derive(Serialize, Deserialize)]
struct SpertRecord {
    tokens: Vec<String>,
    entities: Vec<SpertEntity>,
    relations: Vec<SpertRelation>,
    orig_id: String,
}

/// Groups samples into documents by the doc-key part of their ids, in order
/// of first appearance.
fn group_documents(samples: &[Sample]) -> Vec<(&str, Vec<&Sample>)> {
    let mut order: Vec<(&str, Vec<&Sample>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        let key = s.doc_key();
        match index.get(key) {
            Some(&i) => order[i].1.push(s),
            None => {
                index.insert(key, order.len());
                order.push((key, vec![s]));
            }
        }
    }
    order
}

pub fn write_documents<W: Write>(
    samples: &[Sample],
    with_clusters: bool,
    mut out: W,
) -> Result<(), std::io::Error> {
    for (doc_key, sentences) in group_documents(samples) {
        let mut record = SciercOut {
            doc_key,
            sentences: Vec::with_capacity(sentences.len()),
            ner: Vec::with_capacity(sentences.len()),
            relations: Vec::with_capacity(sentences.len()),
            clusters: with_clusters.then_some([]),
        };
        let mut offset = 0;
        for s in sentences {
            record.sentences.push(&s.tokens);
            record.ner.push(
                s.entities
                    .iter()
                    .map(|e| (offset + e.start, offset + e.end - 1, e.label.as_str()))
                    .collect(),
            );
            record.relations.push(
                s.relations
                    .iter()
                    .map(|r| {
                        let a = s.entities[r.subject];
                        let b = s.entities[r.object];
                        (
                            offset + a.start,
                            offset + a.end - 1,
                            offset + b.start,
                            offset + b.end - 1,
                            r.label.document_label(),
                        )
                    })
                    .collect(),
            );
            offset += s.tokens.len();
        }
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_spert<W: Write>(samples: &[Sample], mut out: W) -> Result<(), std::io::Error> {
    let records: Vec<SpertRecord> = samples
        .iter()
        .map(|s| SpertRecord {
            tokens: s.tokens.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| SpertEntity {
                    label: e.label,
                    start: e.start,
                    end: e.end,
                })
                .collect(),
            relations: s
                .relations
                .iter()
                .map(|r| SpertRelation {
                    label: r.label,
                    head: r.subject,
                    tail: r.object,
                })
                .collect(),
            orig_id: s.id.clone(),
        })
        .collect();
    serde_json::to_writer(&mut out, &records)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Writes `samples` in `format` to `path`, creating parent directories.
pub fn export(samples: &[Sample], format: ExportFormat, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(path, e))?;
    }
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let out = BufWriter::new(file);
    match format {
        ExportFormat::Scierc => write_documents(samples, true, out),
        ExportFormat::Marker => write_documents(samples, false, out),
        ExportFormat::Spert => write_spert(samples, out),
    }
    .map_err(|e| CorpusError::io(path, e))
}

pub fn read_spert<R: Read>(reader: R) -> Result<Vec<Sample>, CorpusError> {
    let records: Vec<SpertRecord> =
        serde_json::from_reader(reader).map_err(|e| CorpusError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
    records
        .into_iter()
        .map(|r| {
            Sample::new(
                r.orig_id,
                r.tokens,
                r.entities
                    .into_iter()
                    .map(|e| EntityMention::new(e.start, e.end, e.label))
                    .collect(),
                r.relations
                    .into_iter()
                    .map(|r| RelationMention::new(r.head, r.tail, r.label))
                    .collect(),
            )
        })
        .collect()
}

pub fn load_spert(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_spert(BufReader::new(file))
}

/// Loads any supported file as a flat sample list. Spert files are
/// recognised by a leading `[`.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let mut head = [0u8; 1];
    let mut file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let first = loop {
        match file.read(&mut head) {
            Ok(0) => break None,
            Ok(_) if head[0].is_ascii_whitespace() => continue,
            Ok(_) => break Some(head[0]),
            Err(e) => return Err(CorpusError::io(path, e)),
        }
    };
    match first {
        Some(b'[') => load_spert(path),
        _ => load_scierc(path).map(|ds| flatten(&ds)),
    }
}
