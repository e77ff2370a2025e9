use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pga_core::corpus::load_samples;
use pga_core::evalkit::PredictionSet;
use pga_core::stub::{fake_llm_handler, StubServer};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/scierc_fixture.json")
}

fn here(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn pga(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pga"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PGA_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn err_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr.trim_end().to_string()
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pga(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage: pga"));
}

#[test]
fn bad_flags_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = pga(&["stats", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(err_line(&out).starts_with("error: usage: "));
}

#[test]
fn config_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "corpus = \"x\"\nendpont = \"http://x\"\n").unwrap();
    let out = pga(&["--config", s(&cfg), "stats"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let line = err_line(&out);
    assert!(line.starts_with("error: config: "), "{line}");
    assert!(line.contains("endpont"), "{line}");

    let out = pga(&["--mode", "sometimes", "stats", s(&fixture())], dir.path());
    assert!(err_line(&out).starts_with("error: config: "));
}

#[test]
fn stats_prints_fixture_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&pga(&["stats", s(&fixture())], dir.path()));
    assert!(
        stdout.contains("260 samples, 630 entities (6 types), 344 relations (7 types)"),
        "{stdout}"
    );
}

#[test]
fn stats_reads_the_corpus_from_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("corpus = {:?}\n", s(&fixture()))).unwrap();
    let stdout = ok(&pga(&["--config", s(&cfg), "stats"], dir.path()));
    assert!(stdout.contains("260 samples"));
}

#[test]
fn scierc_splits_report_release_sizes() {
    let Some(dir) = std::env::var_os("PGA_SCIERC_DIR").map(PathBuf::from) else {
        return;
    };
    let cwd = tempfile::tempdir().unwrap();
    let stdout = ok(&pga(&["stats", s(&dir.join("train.json"))], cwd.path()));
    assert!(stdout.contains(": 1861 samples"), "{stdout}");
}

#[test]
fn generate_replay_matches_golden_directory() {
    let golden = here("tests/golden/augment_generate");
    let cache = here("tests/fixtures/generate_cache.jsonl");
    if std::env::var_os("PGA_BLESS").is_some() {
        // one recorded run against the local stub
        let server = StubServer::start(fake_llm_handler).unwrap();
        let rec = tempfile::tempdir().unwrap();
        let cfg = rec.path().join("run.toml");
        std::fs::write(&cfg, format!("endpoint = {:?}\n", server.url())).unwrap();
        let out = rec.path().join("out");
        ok(&pga(
            &[
                "--config",
                s(&cfg),
                "--method",
                "generate",
                "--mode",
                "record",
                "--out",
                s(&out),
                "augment",
                "--corpus",
                s(&fixture()),
            ],
            rec.path(),
        ));
        std::fs::create_dir_all(cache.parent().unwrap()).unwrap();
        std::fs::copy(out.join("cache.jsonl"), &cache).unwrap();
        let _ = std::fs::remove_dir_all(&golden);
        std::fs::create_dir_all(&golden).unwrap();
        ok(&pga(
            &[
                "--method",
                "generate",
                "--mode",
                "replay",
                "--out",
                s(&golden),
                "augment",
                "--corpus",
                s(&fixture()),
                "--cache",
                s(&cache),
            ],
            rec.path(),
        ));
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&pga(
        &[
            "--method",
            "generate",
            "--mode",
            "replay",
            "--out",
            s(&out),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        dir.path(),
    ));
    assert!(stdout.contains("inputs: 260"), "{stdout}");
    assert_eq!(snapshot(&out), snapshot(&golden));
}

#[test]
fn replay_is_idempotent_and_verifiable() {
    let cache = here("tests/fixtures/generate_cache.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let fx = fixture();
    let args = [
        "--method",
        "generate",
        "--out",
        s(&out),
        "augment",
        "--corpus",
        s(&fx),
        "--cache",
        s(&cache),
    ];
    ok(&pga(&args, dir.path()));
    let first = snapshot(&out);
    ok(&pga(&args, dir.path()));
    assert_eq!(snapshot(&out), first);

    let stdout = ok(&pga(
        &[
            "--method",
            "generate",
            "--out",
            s(&out),
            "replay-verify",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        dir.path(),
    ));
    assert!(stdout.contains("identical"), "{stdout}");
}

#[test]
fn replay_without_a_recording_is_a_cache_miss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cache = here("tests/fixtures/generate_cache.jsonl");
    let o = pga(
        &[
            "--method",
            "paraphrase",
            "--out",
            s(&out),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        dir.path(),
    );
    assert!(err_line(&o).starts_with("error: cache_miss: "));
}

#[test]
fn record_then_replay_paraphrase_through_the_stub() {
    let server = StubServer::start(fake_llm_handler).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "endpoint = {:?}\nmethod = \"paraphrase\"\nconcurrency = 8\n",
            server.url()
        ),
    )
    .unwrap();
    let rec = dir.path().join("rec");
    let report = ok(&pga(
        &[
            "--config",
            s(&cfg),
            "--mode",
            "record",
            "--out",
            s(&rec),
            "augment",
            "--corpus",
            s(&fixture()),
        ],
        dir.path(),
    ));
    assert!(report.contains("defect rate: 0.00%"), "{report}");
    drop(server);
    let rep = dir.path().join("rep");
    let cache = rec.join("cache.jsonl");
    ok(&pga(
        &[
            "--config",
            s(&cfg),
            "--mode",
            "replay",
            "--out",
            s(&rep),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        dir.path(),
    ));
    for f in [
        "paraphrase.pseudo.jsonl",
        "paraphrase.report.json",
        "paraphrase.defects.jsonl",
    ] {
        assert_eq!(
            std::fs::read(rec.join(f)).unwrap(),
            std::fs::read(rep.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn record_cache_must_live_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let elsewhere = dir.path().join("cache.jsonl");
    let o = pga(
        &[
            "--method",
            "generate",
            "--mode",
            "record",
            "--out",
            s(&out),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&elsewhere),
        ],
        dir.path(),
    );
    assert!(err_line(&o).starts_with("error: config: "));
    assert!(!elsewhere.exists());
}

#[test]
fn the_pipeline_writes_only_under_out() {
    let cache = here("tests/fixtures/generate_cache.jsonl");
    let cwd = tempfile::tempdir().unwrap();
    let inputs = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = out.path();
    let gold = inputs.path().join("gold.json");
    std::fs::copy(fixture(), &gold).unwrap();
    let before = snapshot(inputs.path());

    ok(&pga(
        &[
            "--method",
            "generate",
            "--out",
            s(o),
            "augment",
            "--corpus",
            s(&gold),
            "--cache",
            s(&cache),
        ],
        cwd.path(),
    ));
    let pseudo = o.join("generate.pseudo.jsonl");
    let combined = ok(&pga(
        &[
            "--format",
            "spert",
            "--out",
            s(o),
            "combine",
            "--corpus",
            s(&gold),
            "--pseudo",
            s(&pseudo),
        ],
        cwd.path(),
    ));
    assert!(combined.contains("(260 original)"), "{combined}");
    let sub = ok(&pga(
        &[
            "--n",
            "20",
            "--seed",
            "13",
            "--out",
            s(o),
            "subset",
            "--pseudo",
            s(&pseudo),
        ],
        cwd.path(),
    ));
    assert!(sub.starts_with("20 pseudo-samples"), "{sub}");
    ok(&pga(
        &[
            "--format",
            "marker",
            "--out",
            s(o),
            "sole",
            "--pseudo",
            s(&pseudo),
        ],
        cwd.path(),
    ));
    ok(&pga(
        &[
            "--format",
            "scierc",
            "--out",
            s(o),
            "export",
            "--corpus",
            s(&gold),
        ],
        cwd.path(),
    ));
    ok(&pga(
        &[
            "--out",
            s(o),
            "stats",
            s(&gold),
            s(&o.join("sole.marker.json")),
        ],
        cwd.path(),
    ));
    let report = ok(&pga(
        &[
            "--n",
            "50",
            "--out",
            s(o),
            "fidelity",
            "--corpus",
            s(&gold),
            "--pseudo",
            s(&pseudo),
        ],
        cwd.path(),
    ));
    assert!(report.contains("pairs: 50"), "{report}");

    let pred = o.join("pred.jsonl");
    let samples = load_samples(&gold).unwrap();
    PredictionSet::from_gold(&samples)
        .write(std::fs::File::create(&pred).unwrap())
        .unwrap();
    let table = ok(&pga(
        &[
            "--out",
            s(o),
            "score",
            "--gold",
            s(&gold),
            "--pred",
            s(&pred),
        ],
        cwd.path(),
    ));
    assert!(table.lines().nth(1).unwrap().ends_with("1.0000"), "{table}");

    assert!(
        std::fs::read_dir(cwd.path()).unwrap().next().is_none(),
        "cwd was written to"
    );
    assert_eq!(snapshot(inputs.path()), before);
    let mut names: Vec<String> = snapshot(o).into_iter().map(|(n, _)| n).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "combined.spert.json",
            "embeddings.jsonl",
            "fidelity.csv",
            "fidelity.txt",
            "generate.defects.jsonl",
            "generate.pseudo.jsonl",
            "generate.report.json",
            "pred.jsonl",
            "scierc.json",
            "score.json",
            "sole.marker.json",
            "stats.json",
            "subset_20_seed13.pseudo.jsonl",
        ]
    );
}

#[test]
fn exported_combination_loads_back() {
    let cache = here("tests/fixtures/generate_cache.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path();
    ok(&pga(
        &[
            "--method",
            "generate",
            "--out",
            s(o),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        o,
    ));
    let pseudo = o.join("generate.pseudo.jsonl");
    ok(&pga(
        &[
            "--format",
            "spert",
            "--out",
            s(o),
            "combine",
            "--corpus",
            s(&fixture()),
            "--pseudo",
            s(&pseudo),
        ],
        o,
    ));
    let all = load_samples(&o.join("combined.spert.json")).unwrap();
    let pseudo_n = std::fs::read_to_string(&pseudo).unwrap().lines().count();
    assert_eq!(all.len(), 260 + pseudo_n);
    assert!(all[260].id.starts_with("pga_g_"));
    let dup = pga(
        &[
            "--out",
            s(o),
            "combine",
            "--corpus",
            s(&fixture()),
            "--pseudo",
            s(&pseudo),
            "--pseudo",
            s(&pseudo),
        ],
        o,
    );
    assert!(err_line(&dup).starts_with("error: duplicate_id: "));
}

#[test]
fn flags_override_config_values() {
    let cache = here("tests/fixtures/generate_cache.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "out = {:?}\nn = 5\nseed = 1\nmethod = \"generate\"\n",
            s(&o)
        ),
    )
    .unwrap();
    ok(&pga(
        &[
            "--config",
            s(&cfg),
            "augment",
            "--corpus",
            s(&fixture()),
            "--cache",
            s(&cache),
        ],
        dir.path(),
    ));
    let pseudo = o.join("generate.pseudo.jsonl");
    let five = ok(&pga(
        &["--config", s(&cfg), "subset", "--pseudo", s(&pseudo)],
        dir.path(),
    ));
    assert!(five.starts_with("5 pseudo-samples"));
    let three = ok(&pga(
        &[
            "--config",
            s(&cfg),
            "--n",
            "3",
            "subset",
            "--pseudo",
            s(&pseudo),
        ],
        dir.path(),
    ));
    assert!(three.starts_with("3 pseudo-samples"));
    assert!(o.join("subset_3_seed1.pseudo.jsonl").exists());
}
