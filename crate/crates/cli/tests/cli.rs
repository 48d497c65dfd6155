use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rephrase"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn fixture(docs: usize, config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--out", "input", "--docs", &docs.to_string(), "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join("pipeline.toml"), config).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const MIXED: &str = "seed = 3\n[filter]\nenabled = true\n\
    [[mix.sources]]\nname = \"orig\"\ncorpus = \"@input\"\nweight = 1.0\n\
    [[mix.sources]]\nname = \"qa\"\ncorpus = \"@rephrased\"\nweight = 1.0\n";

#[test]
fn preprocess_writes_passages_and_manifest() {
    let dir = fixture(10, "");
    let out = run(dir.path(), &["preprocess", "-c", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("work/passages/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "preprocess");
    assert!(manifest["total_docs"].as_u64().unwrap() >= 10);
    assert!(dir.path().join("work/passages/passages-00000.jsonl").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("10 documents"));
}

#[test]
fn run_all_matches_individual_stages() {
    let a = fixture(60, MIXED);
    let out = run(a.path(), &["run-all", "-c", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mio. docs") && stdout.contains("B tokens"), "{stdout}");

    let b = fixture(60, MIXED);
    for stage in ["preprocess", "rephrase", "postprocess", "score", "filter", "mix", "stats"] {
        let out = run(b.path(), &[stage, "-c", "pipeline.toml"]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }

    // the checkpoint and throughput report carry timings and arrival order
    let keep = |files: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        files
            .into_iter()
            .filter(|(p, _)| !p.ends_with("throughput.json") && !p.ends_with("checkpoint.jsonl"))
            .collect()
    };
    let fa = keep(files(&a.path().join("work")));
    let fb = keep(files(&b.path().join("work")));
    assert_eq!(
        fa.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        fb.iter().map(|(p, _)| p).collect::<Vec<_>>()
    );
    for ((p, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs", p.display());
    }
}

#[test]
fn filter_without_scores_fails_listing_ids() {
    let dir = fixture(8, "");
    for stage in ["preprocess", "rephrase", "postprocess"] {
        assert!(run(dir.path(), &[stage, "-c", "pipeline.toml"]).status.success());
    }
    let out = run(dir.path(), &["filter", "-c", "pipeline.toml", "--threshold", "0.97"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no score") && stderr.contains("doc-000"), "{stderr}");
}

#[test]
fn config_errors_exit_one() {
    let dir = fixture(3, "[split]\nmax_tokens = 10.0\n");
    let out = run(dir.path(), &["preprocess", "-c", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["preprocess", "-c", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["preprocess"]);
    assert_eq!(out.status.code(), Some(1), "missing required flag is a usage error");
}

#[test]
fn missing_stage_input_exits_two() {
    let dir = fixture(3, "");
    let out = run(dir.path(), &["postprocess", "-c", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hint"));
}

#[test]
fn changed_config_is_refused_on_resume() {
    let dir = fixture(5, "");
    assert!(run(dir.path(), &["preprocess", "-c", "pipeline.toml"]).status.success());
    let out = run(dir.path(), &["rephrase", "-c", "pipeline.toml", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn missing_auth_variable_is_reported() {
    let dir = fixture(3, "[backend]\nkind = \"http\"\nauth_env = \"REPHRASE_TEST_TOKEN_UNSET\"\n");
    assert!(run(dir.path(), &["preprocess", "-c", "pipeline.toml"]).status.success());
    let out = run(dir.path(), &["rephrase", "-c", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("REPHRASE_TEST_TOKEN_UNSET"));
}

#[test]
fn templates_lists_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["templates"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 10);
    let out = run(dir.path(), &["templates", "--language", "de"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("qa_opt_de"));
}
