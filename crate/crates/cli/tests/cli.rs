use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn lightmt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lightmt"))
}

fn run(cmd: &mut Command, stdin: &[u8]) -> Output {
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn lightmt");
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn tiny_model(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.lmt");
    let out = run(
        lightmt().args(["random-model", "--enc-layers", "2", "--d-model", "32", "--heads-enc", "4"]).args([
            "--heads-dec",
            "2",
            "--ffn-enc",
            "64",
            "--ffn-dec",
            "32",
            "--merges",
            "80",
            "--max-positions",
            "128",
            "--out",
        ]).arg(&path),
        b"",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn translate(model: &Path, input: &[u8], extra: &[&str]) -> Output {
    run(lightmt().arg("translate").arg("--model").arg(model).args(extra), input)
}

#[test]
fn empty_stdin_gives_empty_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let out = translate(&model, b"", &[]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn empty_line_keeps_its_position() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let out = translate(&model, b"The cat sat on the mat.\n\nA lower tower.\n", &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let sentences = ["the cat sat .", "", "a lower tower stood near the newest houses", "dogs", "(quick!)"];
    let corpus: String = (0..150).map(|i| format!("{}\n", sentences[i % sentences.len()])).collect();
    let base = translate(&model, corpus.as_bytes(), &["--workers", "1", "--chunk-lines", "16"]);
    assert!(base.status.success());
    assert_eq!(String::from_utf8_lossy(&base.stdout).lines().count(), 150);
    for workers in ["4", "8"] {
        let out = translate(&model, corpus.as_bytes(), &["--workers", workers, "--chunk-lines", "16"]);
        assert!(out.status.success());
        assert_eq!(out.stdout, base.stdout, "workers={workers}");
    }
}

#[test]
fn invalid_utf8_is_translated_not_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let out = translate(&model, b"ok\n\xff\xfe bad bytes\nend", &[]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
}

#[test]
fn missing_or_corrupt_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = translate(&dir.path().join("nope.lmt"), b"hi\n", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.lmt"));

    let junk = dir.path().join("junk.lmt");
    std::fs::write(&junk, b"not a model at all").unwrap();
    let out = translate(&junk, b"hi\n", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn inspect_lists_directory() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let out = run(lightmt().arg("inspect").arg(&model), b"");
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("format_version=1"));
    assert!(text.contains("config=enc:2 dec:1 d_model:32"));
    assert!(text.lines().any(|l| l.starts_with("embed.tokens f32 [")));
    assert!(text.lines().any(|l| l.starts_with("output.weight alias")));
}

#[test]
fn bench_reports_key_values() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "the cat sat .\nthe dog\n\n").unwrap();
    let out = run(lightmt().arg("bench").arg("--model").arg(&model).arg(&corpus), b"");
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap_or_else(|| panic!("{k} missing from {text}"))
            .to_owned()
    };
    assert_eq!(get("lines"), "3");
    assert_eq!(get("words"), "6");
    assert_eq!(get("sbatch"), "128");
    assert_eq!(get("wbatch"), "2048");
    assert!(get("memory_estimate_bytes").parse::<u64>().unwrap() > 0);
}

#[test]
fn selftest_passes_on_default_model() {
    let out = run(lightmt().arg("selftest"), b"");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().last().unwrap() == "selftest=pass");
}
