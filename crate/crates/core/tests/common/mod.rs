#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use pga_core::corpus::{flatten, load_scierc, Sample};
use pga_core::gateway::{
    digest, CompletionCache, CompletionParams, CompletionRecord, Transport, TransportError,
    TransportStatus,
};
use pga_core::promptkit::PromptText;
use pga_core::EntityMention;

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scierc_fixture.json")
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(golden_path(name)).unwrap_or_else(|e| panic!("golden {name}: {e}"))
}

pub fn fixture_samples() -> Vec<Sample> {
    flatten(&load_scierc(&fixture_path()).expect("fixture loads"))
}

/// `n` distinct samples built from the fixture's bracketable samples that
/// carry at least one entity. Each copy gets a `Variant <k> :` prefix and a
/// `-v<k>` suffix on its first entity so that no two prompts coincide.
pub fn synthetic_corpus(n: usize) -> Vec<Sample> {
    let base: Vec<Sample> = fixture_samples()
        .into_iter()
        .filter(|s| s.is_bracketable() && !s.entities.is_empty())
        .collect();
    (0..n)
        .map(|k| {
            let b = &base[k % base.len()];
            let mut tokens = vec!["Variant".to_string(), k.to_string(), ":".to_string()];
            tokens.extend(b.tokens.iter().cloned());
            tokens[b.entities[0].end + 2].push_str(&format!("-v{k}"));
            let entities = b
                .entities
                .iter()
                .map(|e| EntityMention::new(e.start + 3, e.end + 3, e.label))
                .collect();
            Sample::new(
                format!("SYN{:04}#0", k),
                tokens,
                entities,
                b.relations.clone(),
            )
            .expect("shifted sample stays valid")
        })
        .collect()
}

pub fn record(
    prompt: &PromptText,
    params: &CompletionParams,
    attempt: u32,
    text: &str,
) -> CompletionRecord {
    CompletionRecord {
        prompt_digest: digest(prompt, params),
        attempt,
        raw_text: text.to_string(),
        transport_status: TransportStatus::Ok,
        created_at: 0,
    }
}

pub fn seed(
    cache: &CompletionCache,
    prompt: &PromptText,
    params: &CompletionParams,
    attempt: u32,
    text: &str,
) {
    cache.insert(record(prompt, params, attempt, text)).unwrap();
}

pub fn completion_body(text: &str) -> String {
    serde_json::json!({ "choices": [{ "text": text }] }).to_string()
}

/// Transport that answers through a closure and counts calls.
pub struct FnTransport<F> {
    pub calls: Arc<AtomicUsize>,
    f: F,
}

impl<F> FnTransport<F>
where
    F: Fn(&str) -> Result<String, TransportError> + Send + Sync,
{
    pub fn new(f: F) -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (
            FnTransport {
                calls: calls.clone(),
                f,
            },
            calls,
        )
    }
}

impl<F> Transport for FnTransport<F>
where
    F: Fn(&str) -> Result<String, TransportError> + Send + Sync,
{
    fn post(&self, body: &str) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(body)
    }
}

/// Walks a directory tree into sorted (relative path, bytes) pairs.
pub fn snapshot(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Compares against a frozen file under `tests/golden`. With `PGA_BLESS=1`
/// the file is (re)written instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("PGA_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("golden {name} missing ({e}); run with PGA_BLESS=1"));
    assert_eq!(actual, expected, "golden {name} differs");
}

/// Structural type of a JSON value: objects keep their key sets, uniform
/// arrays collapse to their element schema, mixed arrays become positional
/// tuples (an empty array merges with anything).
pub fn schema_of(v: &serde_json::Value) -> serde_json::Value {
    use serde_json::{json, Value};
    match v {
        Value::Null => json!("null"),
        Value::Bool(_) => json!("boolean"),
        Value::Number(n) if n.is_u64() || n.is_i64() => json!("integer"),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
        Value::Array(items) => {
            let elems: Vec<Value> = items.iter().map(schema_of).collect();
            let merged = elems.iter().cloned().reduce(|a, b| merge_schema(&a, &b));
            match merged {
                None => json!(["empty"]),
                Some(m) if !m.to_string().contains("\"mismatch\"") => json!([m]),
                Some(_) => json!({ "tuple": elems }),
            }
        }
        Value::Object(map) => {
            let mut out = serde_json::Map::new();
            for (k, v) in map {
                out.insert(k.clone(), schema_of(v));
            }
            Value::Object(out)
        }
    }
}

pub fn merge_schema(a: &serde_json::Value, b: &serde_json::Value) -> serde_json::Value {
    use serde_json::{json, Value};
    if a == b {
        return a.clone();
    }
    match (a, b) {
        (Value::String(x), _) if x == "empty" => b.clone(),
        (_, Value::String(y)) if y == "empty" => a.clone(),
        (Value::Array(x), Value::Array(y)) => json!([merge_schema(&x[0], &y[0])]),
        (Value::Object(x), Value::Object(y))
            if x.contains_key("tuple") && y.contains_key("tuple") =>
        {
            let (tx, ty) = (
                x["tuple"].as_array().unwrap(),
                y["tuple"].as_array().unwrap(),
            );
            if tx.len() == ty.len() {
                json!({ "tuple": tx.iter().zip(ty).map(|(a, b)| merge_schema(a, b)).collect::<Vec<_>>() })
            } else {
                json!({ "mismatch": [a, b] })
            }
        }
        (Value::Object(x), Value::Object(y)) if x.keys().eq(y.keys()) => Value::Object(
            x.iter()
                .map(|(k, v)| (k.clone(), merge_schema(v, &y[k])))
                .collect(),
        ),
        _ => json!({ "mismatch": [a, b] }),
    }
}

/// One merged schema over every line of a JSONL text.
pub fn jsonl_schema(text: &str) -> serde_json::Value {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| schema_of(&serde_json::from_str(l).unwrap()))
        .reduce(|a, b| merge_schema(&a, &b))
        .unwrap_or(serde_json::json!("empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    DropPair,
    Rename,
    InsertPair,
    Unbalance,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::DropPair,
        Mutation::Rename,
        Mutation::InsertPair,
        Mutation::Unbalance,
    ];

    pub fn expected(self) -> pga_core::DefectClass {
        use pga_core::DefectClass::*;
        match self {
            Mutation::DropPair => MissingEntity,
            Mutation::Rename => EntitySetMismatch,
            Mutation::InsertPair => ExtraEntity,
            Mutation::Unbalance => UnbalancedBrackets,
        }
    }
}

fn render(tokens: &[String], entities: Vec<EntityMention>) -> String {
    let s = Sample {
        id: "m#0".into(),
        tokens: tokens.to_vec(),
        entities,
        relations: vec![],
    };
    pga_core::promptkit::render_bracketed(&s).unwrap().0
}

/// Applies `m` to the identity bracketing of `s`. `None` when the sample
/// offers nothing to mutate (no entity, or no free word for an insert).
pub fn mutate<R: rand::Rng>(s: &Sample, m: Mutation, rng: &mut R) -> Option<String> {
    let n = s.entities.len();
    match m {
        Mutation::DropPair if n > 0 => {
            let i = rng.random_range(0..n);
            let mut ents = s.entities.clone();
            ents.remove(i);
            Some(render(&s.tokens, ents))
        }
        Mutation::Rename if n > 0 => {
            let e = s.entities[rng.random_range(0..n)];
            let mut tokens = s.tokens.clone();
            tokens[e.end - 1].push_str("zqx");
            Some(render(&tokens, s.entities.clone()))
        }
        Mutation::InsertPair => {
            let free: Vec<usize> = (0..s.tokens.len())
                .filter(|&t| {
                    s.tokens[t].chars().all(char::is_alphanumeric)
                        && !s.entities.iter().any(|e| e.start <= t && t < e.end)
                })
                .collect();
            if free.is_empty() {
                return None;
            }
            let t = free[rng.random_range(0..free.len())];
            let mut ents = s.entities.clone();
            ents.push(EntityMention::new(t, t + 1, pga_core::EntityType::Generic));
            ents.sort_by_key(|e| (e.start, e.end));
            Some(render(&s.tokens, ents))
        }
        Mutation::Unbalance if n > 0 => {
            let text = render(&s.tokens, s.entities.clone());
            let positions: Vec<usize> = text
                .char_indices()
                .filter(|(_, c)| *c == '[' || *c == ']')
                .map(|(i, _)| i)
                .collect();
            let p = positions[rng.random_range(0..positions.len())];
            let mut out = text;
            out.remove(p);
            Some(out)
        }
        _ => None,
    }
}

/// Replay cache for a paraphrase run: every sample answers with its own
/// bracketing, except that samples in `defective` first answer without
/// brackets and succeed on attempt 2.
pub fn paraphrase_cache(
    samples: &[Sample],
    defective: &std::collections::HashSet<usize>,
) -> CompletionCache {
    use pga_core::promptkit::{build_paraphrase_prompt, render_bracketed};
    let cache = CompletionCache::in_memory();
    let params = CompletionParams::for_method(pga_core::Method::Paraphrase);
    for (i, s) in samples.iter().enumerate() {
        let Ok(p) = build_paraphrase_prompt(s) else {
            continue;
        };
        let good = render_bracketed(s).unwrap().0;
        if defective.contains(&i) {
            seed(&cache, &p, &params, 1, &s.text());
            seed(&cache, &p, &params, 2, &good);
        } else {
            seed(&cache, &p, &params, 1, &good);
        }
    }
    cache
}

/// Replay cache for a generate run: the stub's completion for every sample,
/// an unbracketed sentence for those in `defective`.
pub fn generate_cache(
    samples: &[Sample],
    defective: &std::collections::HashSet<usize>,
) -> CompletionCache {
    use pga_core::promptkit::{build_generate_prompt, GenerateInput};
    let cache = CompletionCache::in_memory();
    let params = CompletionParams::for_method(pga_core::Method::Generate);
    for (i, s) in samples.iter().enumerate() {
        let p = build_generate_prompt(&GenerateInput::from_sample(s));
        let text = if defective.contains(&i) {
            "We present a study without any marked entity.".to_string()
        } else {
            pga_core::stub::fake_completion(&p.text).unwrap()
        };
        seed(&cache, &p, &params, 1, &text);
    }
    cache
}

/// Plain-loop scorer: each distinct prediction is checked against the gold
/// list by hand. Returns (tp, fp, fn) for Ent, Rel and Rel+.
pub fn oracle_counts(
    gold: &[Sample],
    pred: &pga_core::evalkit::PredictionSet,
) -> [(usize, usize, usize); 3] {
    use pga_core::{EntityType, RelationType};
    type Rel = (
        usize,
        (usize, usize),
        (usize, usize),
        RelationType,
        EntityType,
        EntityType,
    );
    fn same(a: &Rel, b: &Rel, typed: bool) -> bool {
        let direct = a.1 == b.1 && a.2 == b.2 && (!typed || (a.4 == b.4 && a.5 == b.5));
        let swapped = a.1 == b.2 && a.2 == b.1 && (!typed || (a.4 == b.5 && a.5 == b.4));
        a.0 == b.0 && a.3 == b.3 && (direct || (a.3.is_symmetric() && swapped))
    }
    fn distinct<T: Clone>(items: &[T], eq: impl Fn(&T, &T) -> bool) -> Vec<T> {
        let mut out: Vec<T> = Vec::new();
        for x in items {
            if !out.iter().any(|y| eq(x, y)) {
                out.push(x.clone());
            }
        }
        out
    }
    fn count<T>(g: &[T], p: &[T], eq: impl Fn(&T, &T) -> bool) -> (usize, usize, usize) {
        let tp = p.iter().filter(|x| g.iter().any(|y| eq(x, y))).count();
        (tp, p.len() - tp, g.len() - tp)
    }
    let mut g_ent = Vec::new();
    let mut g_rel: Vec<Rel> = Vec::new();
    for (i, s) in gold.iter().enumerate() {
        for e in &s.entities {
            g_ent.push((i, e.start, e.end, e.label));
        }
        for r in &s.relations {
            let (a, b) = (s.entities[r.subject], s.entities[r.object]);
            g_rel.push((
                i,
                (a.start, a.end),
                (b.start, b.end),
                r.label,
                a.label,
                b.label,
            ));
        }
    }
    let mut p_ent = Vec::new();
    let mut p_rel: Vec<Rel> = Vec::new();
    for p in &pred.samples {
        let i = gold.iter().position(|s| s.id == p.id).unwrap();
        for e in &p.entities {
            p_ent.push((i, e.start, e.end, e.label));
        }
        for r in &p.relations {
            p_rel.push((
                i,
                r.subject,
                r.object,
                r.label,
                r.subject_type.unwrap(),
                r.object_type.unwrap(),
            ));
        }
    }
    let ent_eq =
        |a: &(usize, usize, usize, EntityType), b: &(usize, usize, usize, EntityType)| a == b;
    let (g_ent, p_ent) = (distinct(&g_ent, ent_eq), distinct(&p_ent, ent_eq));
    let untyped = |a: &Rel, b: &Rel| same(a, b, false);
    let typed = |a: &Rel, b: &Rel| same(a, b, true);
    [
        count(&g_ent, &p_ent, ent_eq),
        count(
            &distinct(&g_rel, untyped),
            &distinct(&p_rel, untyped),
            untyped,
        ),
        count(&distinct(&g_rel, typed), &distinct(&p_rel, typed), typed),
    ]
}

/// Gold-derived predictions with random drops, relabels, span shifts,
/// argument swaps and spurious additions. Every relation carries types.
pub fn perturbed_predictions<R: rand::Rng>(
    gold: &[Sample],
    rng: &mut R,
) -> pga_core::evalkit::PredictionSet {
    use pga_core::evalkit::PredictionSet;
    use pga_core::{EntityType, RelationType};
    let mut set = PredictionSet::from_gold(gold);
    set.samples.retain(|_| rng.random_bool(0.9));
    for p in &mut set.samples {
        let len = gold.iter().find(|s| s.id == p.id).unwrap().tokens.len();
        p.entities.retain(|_| rng.random_bool(0.8));
        for e in &mut p.entities {
            if rng.random_bool(0.15) {
                e.label = EntityType::ALL[rng.random_range(0..6)];
            }
            if rng.random_bool(0.1) && e.end < len {
                e.end += 1;
            }
        }
        if rng.random_bool(0.3) {
            let s = rng.random_range(0..len);
            p.entities.push(EntityMention::new(
                s,
                s + 1,
                EntityType::ALL[rng.random_range(0..6)],
            ));
        }
        p.relations.retain(|_| rng.random_bool(0.8));
        for r in &mut p.relations {
            if rng.random_bool(0.15) {
                r.label = RelationType::ALL[rng.random_range(0..7)];
            }
            if rng.random_bool(0.15) {
                std::mem::swap(&mut r.subject, &mut r.object);
                std::mem::swap(&mut r.subject_type, &mut r.object_type);
            }
            if rng.random_bool(0.15) {
                r.subject_type = Some(EntityType::ALL[rng.random_range(0..6)]);
            }
        }
        if rng.random_bool(0.3) && len >= 2 {
            let a = rng.random_range(0..len - 1);
            p.relations.push(pga_core::evalkit::PredictedRelation {
                subject: (a, a + 1),
                object: (a + 1, len),
                label: RelationType::ALL[rng.random_range(0..7)],
                subject_type: Some(EntityType::Generic),
                object_type: Some(EntityType::Method),
            });
        }
    }
    set
}

/// Top-two principal axes by power iteration with deflation, computed on
/// plain vectors. Signs follow the first non-negligible component.
pub fn power_iteration_axes(points: &[Vec<f64>]) -> [Vec<f64>; 2] {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j] / (n - 1.0);
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.37).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let mut w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = norm;
            if diff < 1e-15 {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        if let Some(first) = v.iter().copied().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        axes.push(v);
    }
    [axes[0].clone(), axes[1].clone()]
}

/// Coordinates of centred `points` on the oracle axes.
pub fn oracle_projection(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let [a, b] = power_iteration_axes(points);
    points
        .iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
            (
                c.iter().zip(&a).map(|(x, y)| x * y).sum(),
                c.iter().zip(&b).map(|(x, y)| x * y).sum(),
            )
        })
        .collect()
}

/// Four points in 3-D with well separated covariance eigenvalues.
pub fn pca_fixture() -> Vec<Vec<f64>> {
    vec![
        vec![2.0, 0.0, 0.5],
        vec![-2.0, 0.5, 0.0],
        vec![0.5, 1.5, -0.25],
        vec![-0.5, -2.0, -0.25],
    ]
}
