//! Augmentation runs and training-set assembly.
//!
//! A run walks the input samples, prompts the gateway once per sample (more
//! for paraphrase retries), validates each completion and keeps the
//! pseudo-samples that pass. Paraphrase re-prompts on a defect up to the
//! policy's retry cap; generate discards on the first defect.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Sample;
use crate::gateway::{CompletionParams, Gateway, GatewayError, Mode};
use crate::postproc::{
    parse_bracketed, realign_generated, realign_paraphrase, DefectClass, DefectLogEntry,
    PseudoSample,
};
use crate::promptkit::{build_generate_prompt, build_paraphrase_prompt, GenerateInput};
use crate::Method;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("transport failure after {processed} processed samples (checkpoint kept): {source}")]
    Transport {
        processed: usize,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("subset size {n} out of range 0..={size}")]
    SubsetRange { n: usize, size: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub method: Method,
    /// Extra attempts after the first; must be 0 for generate.
    pub max_semantic_retries: u32,
    pub params: CompletionParams,
}

impl AugmentPolicy {
    pub fn paraphrase() -> Self {
        AugmentPolicy {
            method: Method::Paraphrase,
            max_semantic_retries: 5,
            params: CompletionParams::for_method(Method::Paraphrase),
        }
    }

    pub fn generate() -> Self {
        AugmentPolicy {
            method: Method::Generate,
            max_semantic_retries: 0,
            params: CompletionParams::for_method(Method::Generate),
        }
    }

    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Paraphrase => AugmentPolicy::paraphrase(),
            Method::Generate => AugmentPolicy::generate(),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.method == Method::Generate && self.max_semantic_retries != 0 {
            return Err(AugmentError::Policy(
                "generate discards defective samples; max_semantic_retries must be 0".into(),
            ));
        }
        self.params
            .validate()
            .map_err(|e| AugmentError::Policy(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub inputs: usize,
    pub produced: usize,
    pub skipped_unbracketable: usize,
    /// Samples whose every attempt was defective.
    pub discarded: usize,
    /// Empty generate inputs answered with the sentinel.
    pub benign_drops: usize,
    pub first_attempt_defects: usize,
    /// Defects over all attempts, by class.
    pub defects: BTreeMap<DefectClass, usize>,
    pub defect_rate: f64,
    pub attempts_total: usize,
}

impl RunReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "method: {}\ninputs: {}\nproduced: {}\ndiscarded: {}\nskipped (unbracketable): {}\nbenign drops: {}\nattempts: {}\nfirst-attempt defects: {}\ndefect rate: {:.2}%\n",
            self.method,
            self.inputs,
            self.produced,
            self.discarded,
            self.skipped_unbracketable,
            self.benign_drops,
            self.attempts_total,
            self.first_attempt_defects,
            self.defect_rate * 100.0
        );
        for (class, n) in &self.defects {
            s.push_str(&format!("  {}: {n}\n", class.as_str()));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Status {
    Produced,
    Discarded,
    Skipped,
    Benign,
}

/// Result of processing one input sample; also the checkpoint line format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Outcome {
    index: usize,
    origin_id: String,
    status: Status,
    attempts: u32,
    log: Vec<DefectLogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo: Option<PseudoSample>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Resume file for live and record runs; ignored in replay.
    pub checkpoint: Option<PathBuf>,
    /// JSONL audit log of every defective completion.
    pub defect_log: Option<PathBuf>,
}

/// Id of the pseudo-sample derived from the `index`-th input (0-based).
pub fn pseudo_id(method: Method, index: usize) -> String {
    format!("pga_{}_{:06}#0", method.code(), index + 1)
}

fn sha_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn process(
    index: usize,
    sample: &Sample,
    policy: &AugmentPolicy,
    gateway: &Gateway,
) -> Result<Outcome, GatewayError> {
    let mut out = Outcome {
        index,
        origin_id: sample.id.clone(),
        status: Status::Discarded,
        attempts: 0,
        log: Vec::new(),
        pseudo: None,
    };
    let (prompt, input) = match policy.method {
        Method::Paraphrase => match build_paraphrase_prompt(sample) {
            Ok(p) => (p, None),
            Err(_) => {
                out.status = Status::Skipped;
                return Ok(out);
            }
        },
        Method::Generate => {
            let g = GenerateInput::from_sample(sample);
            (build_generate_prompt(&g), Some(g))
        }
    };
    let max = match policy.method {
        Method::Paraphrase => 1 + policy.max_semantic_retries,
        Method::Generate => 1,
    };
    for attempt in 1..=max {
        out.attempts = attempt;
        let record = gateway.complete(&prompt, &policy.params, attempt)?;
        let parsed = parse_bracketed(&record.raw_text);
        let result = match &input {
            None => parsed.and_then(|pc| realign_paraphrase(&pc, sample).map(Some)),
            Some(g) => parsed.and_then(|pc| realign_generated(&pc, g)),
        };
        let entry = |defect, benign| DefectLogEntry {
            origin_id: sample.id.clone(),
            method: policy.method,
            attempt,
            defect,
            benign,
            completion_digest: sha_hex(&record.raw_text),
        };
        match result {
            Ok(Some(mut p)) => {
                p.sample.id = pseudo_id(policy.method, index);
                p.attempts = attempt;
                out.status = Status::Produced;
                out.pseudo = Some(p);
                return Ok(out);
            }
            Ok(None) => {
                out.log.push(entry(DefectClass::SentinelOutput, true));
                out.status = Status::Benign;
                return Ok(out);
            }
            Err(defect) => out.log.push(entry(defect, false)),
        }
    }
    Ok(out)
}

fn read_checkpoint(
    path: &Path,
    samples: &[Sample],
) -> Result<HashMap<usize, Outcome>, AugmentError> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => {
            return Err(AugmentError::Io {
                path: path.display().to_string(),
                source: e,
            })
        }
    };
    let bad = |message: String| AugmentError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let o: Outcome =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        match samples.get(o.index) {
            Some(s) if s.id == o.origin_id => {
                done.insert(o.index, o);
            }
            _ => {
                return Err(bad(format!(
                    "line {}: entry for {} does not match the input",
                    n + 1,
                    o.origin_id
                )))
            }
        }
    }
    Ok(done)
}

/// Runs one augmentation pass. Work is spread over as many threads as the
/// gateway allows in flight; outputs keep input order.
pub fn run_augment(
    samples: &[Sample],
    policy: &AugmentPolicy,
    gateway: &Gateway,
    opts: &RunOptions,
) -> Result<(Vec<PseudoSample>, RunReport), AugmentError> {
    policy.validate()?;
    let checkpoint = opts
        .checkpoint
        .as_deref()
        .filter(|_| gateway.mode() != Mode::Replay);
    let mut done = match checkpoint {
        Some(p) => read_checkpoint(p, samples)?,
        None => HashMap::new(),
    };
    let writer = match checkpoint {
        Some(p) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| AugmentError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?,
        )),
        None => None,
    };

    let todo: Vec<usize> = (0..samples.len())
        .filter(|i| !done.contains_key(i))
        .collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let results: Mutex<Vec<Outcome>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<AugmentError>> = Mutex::new(None);
    let workers = gateway.concurrency().min(todo.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                match process(i, &samples[i], policy, gateway) {
                    Ok(o) => {
                        if let Some(w) = &writer {
                            let line = serde_json::to_string(&o).expect("outcome serializes");
                            let mut f = w.lock().expect("checkpoint lock poisoned");
                            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                                abort.store(true, Ordering::SeqCst);
                                failure.lock().unwrap().get_or_insert(AugmentError::Io {
                                    path: checkpoint.unwrap().display().to_string(),
                                    source: e,
                                });
                                break;
                            }
                        }
                        results.lock().unwrap().push(o);
                    }
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        failure.lock().unwrap().get_or_insert(e.into());
                        break;
                    }
                }
            });
        }
    });

    let fresh = results.into_inner().unwrap();
    if let Some(err) = failure.into_inner().unwrap() {
        let processed = done.len() + fresh.len();
        return Err(match err {
            AugmentError::Gateway(source @ GatewayError::Transport { .. }) => {
                AugmentError::Transport { processed, source }
            }
            other => other,
        });
    }
    for o in fresh {
        done.insert(o.index, o);
    }
    let mut outcomes: Vec<Outcome> = done.into_values().collect();
    outcomes.sort_by_key(|o| o.index);

    let mut report = RunReport {
        method: policy.method,
        inputs: samples.len(),
        produced: 0,
        skipped_unbracketable: 0,
        discarded: 0,
        benign_drops: 0,
        first_attempt_defects: 0,
        defects: BTreeMap::new(),
        defect_rate: 0.0,
        attempts_total: 0,
    };
    let mut pseudo = Vec::new();
    let mut log = Vec::new();
    for o in outcomes {
        report.attempts_total += o.attempts as usize;
        match o.status {
            Status::Produced => report.produced += 1,
            Status::Discarded => report.discarded += 1,
            Status::Skipped => report.skipped_unbracketable += 1,
            Status::Benign => report.benign_drops += 1,
        }
        for e in o.log.iter().filter(|e| !e.benign) {
            *report.defects.entry(e.defect).or_default() += 1;
            if e.attempt == 1 {
                report.first_attempt_defects += 1;
            }
        }
        log.extend(o.log);
        pseudo.extend(o.pseudo);
    }
    if report.inputs > 0 {
        report.defect_rate = report.first_attempt_defects as f64 / report.inputs as f64;
    }

    if let Some(path) = &opts.defect_log {
        let io = |e| AugmentError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = File::create(path).map_err(io)?;
        for e in &log {
            writeln!(
                f,
                "{}",
                serde_json::to_string(e).expect("log entry serializes")
            )
            .map_err(io)?;
        }
    }
    Ok((pseudo, report))
}

/// Original samples first, then each pseudo set in order.
pub fn combine(
    original: &[Sample],
    pseudo_sets: &[Vec<PseudoSample>],
) -> Result<Vec<Sample>, AugmentError> {
    let mut seen = HashSet::new();
    let mut out =
        Vec::with_capacity(original.len() + pseudo_sets.iter().map(Vec::len).sum::<usize>());
    let all = original
        .iter()
        .chain(pseudo_sets.iter().flatten().map(|p| &p.sample));
    for s in all {
        if !seen.insert(s.id.as_str()) {
            return Err(AugmentError::DuplicateId(s.id.clone()));
        }
        out.push(s.clone());
    }
    Ok(out)
}

/// `n` pseudo-samples drawn uniformly without replacement, returned in their
/// original order. The draw is a seeded ChaCha8 shuffle of the indices.
pub fn subset(
    pseudo: &[PseudoSample],
    n: usize,
    seed: u64,
) -> Result<Vec<PseudoSample>, AugmentError> {
    if n > pseudo.len() {
        return Err(AugmentError::SubsetRange {
            n,
            size: pseudo.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pseudo.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pseudo[i].clone()).collect())
}

/// Pseudo-samples on their own, as a training set.
pub fn sole(pseudo: &[PseudoSample]) -> Vec<Sample> {
    pseudo.iter().map(|p| p.sample.clone()).collect()
}

/// Reads pseudo-samples written by [`write_pseudo`].
pub fn read_pseudo(path: &Path) -> Result<Vec<PseudoSample>, AugmentError> {
    let io = |e| AugmentError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PseudoSample =
            serde_json::from_str(&line).map_err(|e| AugmentError::Checkpoint {
                path: path.display().to_string(),
                message: format!("line {}: {e}", n + 1),
            })?;
        p.sample.validate().map_err(|e| AugmentError::Checkpoint {
            path: path.display().to_string(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// One JSON object per line, provenance included.
pub fn write_pseudo(pseudo: &[PseudoSample], path: &Path) -> Result<(), AugmentError> {
    let io = |e| AugmentError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = File::create(path).map_err(io)?;
    for p in pseudo {
        writeln!(
            f,
            "{}",
            serde_json::to_string(p).expect("pseudo-sample serializes")
        )
        .map_err(io)?;
    }
    Ok(())
}
