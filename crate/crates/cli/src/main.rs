mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pga_core::augmentor::{
    combine, read_pseudo, run_augment, sole, subset, write_pseudo, AugmentError, AugmentPolicy,
    RunOptions, RunReport,
};
use pga_core::corpus::{compute_stats, export, load_samples, CorpusError, Sample};
use pga_core::evalkit::{score, EvalError, PredictionSet, ScoreOptions};
use pga_core::fidelity::{
    analyze, select_pairs, write_csv, EmbeddingCache, EmbeddingProvider, FidelityError,
    HashedTokenProvider, HttpEmbeddingProvider, PrecomputedProvider, DEFAULT_PAIRS,
};
use pga_core::gateway::{CompletionCache, Gateway, GatewayError, HttpTransport, Mode, RetryPolicy};
use pga_core::Method;

use config::{RunConfig, DEFAULT_EMBEDDING_MODEL, DEFAULT_ENDPOINT};

#[derive(Parser)]
#[command(
    name = "pga",
    version,
    about = "Paraphrase and generation augmentation for relation extraction corpora",
    after_help = "Environment: PGA_API_KEY is sent as the bearer token in live and record mode."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paraphrase or generate.
    #[arg(long, global = true)]
    method: Option<String>,
    /// live, record or replay.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// scierc, spert or marker.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one augmentation pass over a corpus.
    Augment {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Originals followed by one or more pseudo-sample sets.
    Combine {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "pseudo", required = true)]
        pseudo: Vec<PathBuf>,
    },
    /// Seeded uniform draw of `--n` pseudo-samples.
    Subset {
        #[arg(long)]
        pseudo: PathBuf,
    },
    /// Pseudo-samples alone as a training set.
    Sole {
        #[arg(long = "pseudo", required = true)]
        pseudo: Vec<PathBuf>,
    },
    /// Convert a corpus to a backbone format.
    Export {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Sample, entity and relation counts.
    Stats {
        /// Corpus files; defaults to the configured corpus.
        paths: Vec<PathBuf>,
    },
    /// Ent, Rel and Rel+ micro scores of a prediction file.
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Keep argument order of symmetric relations significant.
        #[arg(long)]
        no_symmetric_swap: bool,
    },
    /// Embedding similarity of pseudo-sentences to their origins.
    Fidelity {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long = "pseudo", required = true)]
        pseudo: Vec<PathBuf>,
        /// Precomputed `{sentence, embedding}` JSONL.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Replay an augmentation twice and check the outputs are identical.
    ReplayVerify {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

struct Failure {
    class: &'static str,
    message: String,
}

impl Failure {
    fn new(class: &'static str, message: impl ToString) -> Self {
        Failure {
            class,
            message: message.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl ToString) -> Failure {
    Failure::new("config", e)
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::new("corpus", e)
    }
}

impl From<AugmentError> for Failure {
    fn from(e: AugmentError) -> Self {
        let class = match &e {
            AugmentError::Policy(_) => "config",
            AugmentError::Transport { .. } => "transport",
            AugmentError::Gateway(g) => gateway_class(g),
            AugmentError::Checkpoint { .. } => "checkpoint",
            AugmentError::DuplicateId(_) => "duplicate_id",
            AugmentError::SubsetRange { .. } => "range",
            AugmentError::Io { .. } => "io",
        };
        Failure::new(class, e)
    }
}

fn gateway_class(e: &GatewayError) -> &'static str {
    match e {
        GatewayError::CacheMiss { .. } => "cache_miss",
        GatewayError::Transport { .. } => "transport",
        GatewayError::InvalidParams(_) => "config",
        GatewayError::Protocol(_) => "protocol",
        GatewayError::Cache { .. } => "cache",
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure::new(gateway_class(&e), e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new("score", e)
    }
}

impl From<FidelityError> for Failure {
    fn from(e: FidelityError) -> Self {
        Failure::new("fidelity", e)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::new("io", format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn inside(path: &Path, dir: &Path) -> bool {
    absolute(path).starts_with(absolute(dir))
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let file = match &common.config {
        Some(p) => RunConfig::load(p).map_err(config_err)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        method: common.method.clone(),
        mode: common.mode.clone(),
        n: common.n,
        seed: common.seed,
        format: common.format.clone(),
        out: common.out.clone(),
        ..RunConfig::default()
    };
    let cfg = file.merge(flags);
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Vec<Sample>, Failure> {
    Ok(load_samples(path)?)
}

fn load_pseudo_sets(
    paths: &[PathBuf],
) -> Result<Vec<Vec<pga_core::postproc::PseudoSample>>, Failure> {
    paths
        .iter()
        .map(|p| read_pseudo(p).map_err(Failure::from))
        .collect()
}

fn policy(cfg: &RunConfig, method: Method) -> AugmentPolicy {
    let mut p = AugmentPolicy::for_method(method);
    if method == Method::Paraphrase {
        if let Some(r) = cfg.paraphrase_retries {
            p.max_semantic_retries = r;
        }
    }
    if let Some(m) = &cfg.model {
        p.params.model_name = m.clone();
    }
    p
}

fn gateway(cfg: &RunConfig, mode: Mode, cache_path: &Path) -> Result<Gateway, Failure> {
    let cache = match mode {
        Mode::Replay => {
            return Ok(Gateway::replay(CompletionCache::open_existing(cache_path)?)
                .with_concurrency(cfg.concurrency.unwrap_or(4)))
        }
        Mode::Record => CompletionCache::open(cache_path)?,
        Mode::Live => CompletionCache::in_memory(),
    };
    let endpoint = cfg
        .endpoint
        .clone()
        .unwrap_or_else(|| DEFAULT_ENDPOINT.into());
    let timeout = Duration::from_secs(cfg.timeout_secs.unwrap_or(60));
    let defaults = RetryPolicy::default();
    let retry = RetryPolicy {
        max_attempts: cfg.max_attempts.unwrap_or(defaults.max_attempts),
        max_delay: cfg
            .max_delay_secs
            .map(Duration::from_secs)
            .unwrap_or(defaults.max_delay),
        ..defaults
    };
    Ok(Gateway::new(
        mode,
        Box::new(HttpTransport::from_env(endpoint, timeout)),
        cache,
    )
    .with_retry(retry)
    .with_concurrency(cfg.concurrency.unwrap_or(4)))
}

fn require_method(cfg: &RunConfig) -> Result<Method, Failure> {
    cfg.method()
        .map_err(config_err)?
        .ok_or_else(|| config_err("no method (--method paraphrase|generate)"))
}

/// Runs one augmentation into `out`, returning the report.
fn augment_into(
    cfg: &RunConfig,
    corpus: &Path,
    cache: &Path,
    out: &Path,
) -> Result<RunReport, Failure> {
    let method = require_method(cfg)?;
    let mode = cfg.mode().map_err(config_err)?;
    if mode == Mode::Record && !inside(cache, out) {
        return Err(config_err(format!(
            "record mode writes the cache, which must lie inside {}",
            out.display()
        )));
    }
    let samples = load(corpus)?;
    ensure_dir(out)?;
    let g = gateway(cfg, mode, cache)?;
    let opts = RunOptions {
        checkpoint: (mode != Mode::Replay).then(|| out.join(format!("{method}.checkpoint.jsonl"))),
        defect_log: Some(out.join(format!("{method}.defects.jsonl"))),
    };
    let (pseudo, report) = run_augment(&samples, &policy(cfg, method), &g, &opts)?;
    write_pseudo(&pseudo, &out.join(format!("{method}.pseudo.jsonl")))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out.join(format!("{method}.report.json")), &json)?;
    Ok(report)
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve(&cli.common)?;
    let pick = |flag: &Option<PathBuf>, cfg: &RunConfig| -> Result<PathBuf, Failure> {
        match flag {
            Some(p) => Ok(p.clone()),
            None => cfg.corpus_path().map(Path::to_path_buf).map_err(config_err),
        }
    };
    match &cli.command {
        Command::Augment { corpus, cache } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let cache = match cache {
                Some(c) => c.clone(),
                None => cfg.cache_path().map_err(config_err)?,
            };
            let report = augment_into(&cfg, &pick(corpus, &cfg)?, &cache, out)?;
            print!("{}", report.summary());
        }
        Command::Combine { corpus, pseudo } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let format = cfg.format().map_err(config_err)?;
            let originals = load(&pick(corpus, &cfg)?)?;
            let all = combine(&originals, &load_pseudo_sets(pseudo)?)?;
            ensure_dir(out)?;
            let path = out.join(format!("combined.{}", format.file_name()));
            export(&all, format, &path)?;
            println!(
                "{} samples ({} original) -> {}",
                all.len(),
                originals.len(),
                path.display()
            );
        }
        Command::Subset { pseudo } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let n = cfg.n.ok_or_else(|| config_err("no subset size (--n)"))?;
            let seed = cfg.seed.unwrap_or(0);
            let picked = subset(&read_pseudo(pseudo)?, n, seed)?;
            ensure_dir(out)?;
            let path = out.join(format!("subset_{n}_seed{seed}.pseudo.jsonl"));
            write_pseudo(&picked, &path)?;
            println!("{} pseudo-samples -> {}", picked.len(), path.display());
        }
        Command::Sole { pseudo } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let format = cfg.format().map_err(config_err)?;
            let flat: Vec<_> = load_pseudo_sets(pseudo)?.into_iter().flatten().collect();
            combine(&[], std::slice::from_ref(&flat))?;
            let samples = sole(&flat);
            ensure_dir(out)?;
            let path = out.join(format!("sole.{}", format.file_name()));
            export(&samples, format, &path)?;
            println!("{} pseudo-samples -> {}", samples.len(), path.display());
        }
        Command::Export { corpus } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let format = cfg.format().map_err(config_err)?;
            let samples = load(&pick(corpus, &cfg)?)?;
            ensure_dir(out)?;
            let path = out.join(format.file_name());
            export(&samples, format, &path)?;
            println!("{} samples -> {}", samples.len(), path.display());
        }
        Command::Stats { paths } => {
            let paths = if paths.is_empty() {
                vec![pick(&None, &cfg)?]
            } else {
                paths.clone()
            };
            let mut rows = Vec::new();
            let mut all = Vec::new();
            for p in &paths {
                let samples = load(p)?;
                let s = compute_stats(&samples);
                println!(
                    "{}: {} samples, {} entities ({} types), {} relations ({} types)",
                    p.display(),
                    s.sample_count,
                    s.entity_count,
                    s.entity_type_count,
                    s.relation_count,
                    s.relation_type_count
                );
                rows.push(serde_json::json!({ "path": p.display().to_string(), "stats": s }));
                all.extend(samples);
            }
            let total = compute_stats(&all);
            if paths.len() > 1 {
                println!(
                    "total: {} samples, {} entities ({} types), {} relations ({} types)",
                    total.sample_count,
                    total.entity_count,
                    total.entity_type_count,
                    total.relation_count,
                    total.relation_type_count
                );
            }
            if let Some(out) = &cfg.out {
                ensure_dir(out)?;
                let json = serde_json::json!({ "files": rows, "total": total });
                write_file(
                    &out.join("stats.json"),
                    &(serde_json::to_string_pretty(&json).unwrap() + "\n"),
                )?;
            }
        }
        Command::Score {
            gold,
            pred,
            no_symmetric_swap,
        } => {
            let gold = load(gold)?;
            let pred = PredictionSet::load(pred)?;
            let opts = ScoreOptions {
                symmetric_swap: !no_symmetric_swap && cfg.symmetric_swap.unwrap_or(true),
            };
            let report = score(&gold, &pred, opts)?;
            print!("{report}");
            if let Some(out) = &cfg.out {
                ensure_dir(out)?;
                let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                write_file(&out.join("score.json"), &json)?;
            }
        }
        Command::Fidelity {
            corpus,
            pseudo,
            embeddings,
        } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let originals = load(&pick(corpus, &cfg)?)?;
            let flat: Vec<_> = load_pseudo_sets(pseudo)?.into_iter().flatten().collect();
            let pairs = select_pairs(&originals, &flat, cfg.n.unwrap_or(DEFAULT_PAIRS), cfg.seed);
            let provider: Box<dyn EmbeddingProvider> =
                match embeddings.as_ref().or(cfg.embeddings.as_ref()) {
                    Some(p) => Box::new(PrecomputedProvider::load(p)?),
                    None => match &cfg.embedding_endpoint {
                        Some(url) => Box::new(HttpEmbeddingProvider::new(
                            Box::new(HttpTransport::from_env(
                                url.clone(),
                                Duration::from_secs(cfg.timeout_secs.unwrap_or(60)),
                            )),
                            cfg.embedding_model
                                .clone()
                                .unwrap_or_else(|| DEFAULT_EMBEDDING_MODEL.into()),
                        )),
                        None => Box::new(HashedTokenProvider::default()),
                    },
                };
            ensure_dir(out)?;
            let cache = EmbeddingCache::open(&out.join("embeddings.jsonl"))?;
            let report = analyze(&pairs, provider.as_ref(), &cache)?;
            let csv_path = out.join("fidelity.csv");
            let file = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
            write_csv(&report.projection, std::io::BufWriter::new(file))
                .map_err(io_err(&csv_path))?;
            write_file(&out.join("fidelity.txt"), &report.to_string())?;
            print!("{report}");
        }
        Command::ReplayVerify { corpus, cache } => {
            let out = cfg.out_dir().map_err(config_err)?;
            let cache = match cache {
                Some(c) => c.clone(),
                None => cfg.cache_path().map_err(config_err)?,
            };
            let corpus = pick(corpus, &cfg)?;
            let replay = RunConfig {
                mode: Some("replay".into()),
                ..cfg.clone()
            };
            let runs = [out.join("verify/run1"), out.join("verify/run2")];
            for dir in &runs {
                if dir.exists() {
                    std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
                }
                augment_into(&replay, &corpus, &cache, dir)?;
            }
            let (a, b) = (snapshot(&runs[0])?, snapshot(&runs[1])?);
            if a != b {
                return Err(Failure::new("nondeterministic", "replayed runs differ"));
            }
            println!(
                "replay-verify: {} files identical across two replays",
                a.len()
            );
        }
    }
    Ok(())
}

fn snapshot(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, Failure> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn main() -> ExitCode {
    if std::env::args_os().len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_usage());
        eprintln!("{}", cmd.render_help());
        return ExitCode::from(2);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.class, f.message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
