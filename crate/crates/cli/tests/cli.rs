use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};
use std::thread;

const MERC: &str = env!("CARGO_BIN_EXE_merc");

fn merc(dir: &Path, args: &[&str]) -> Output {
    Command::new(MERC).current_dir(dir).args(args).output().expect("spawn merc")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = merc(dir, args);
    assert!(out.status.success(), "merc {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failing(dir: &Path, args: &[&str]) -> String {
    let out = merc(dir, args);
    assert!(!out.status.success(), "merc {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn small_fixture(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["fixture", "--dir", ".", "--small", "--conversations", &n.to_string()]);
    dir
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn with_client(dir: &Path, client: &str) -> PathBuf {
    let base = fs::read_to_string(dir.join("merc.toml")).unwrap();
    let start = base.find("[client]").unwrap();
    let end = base.find("[zero_shot_client]").unwrap();
    let text = format!("{}{client}\n\n{}", &base[..start], &base[end..]).replace("backoff_ms = 0", "backoff_ms = 0\nmax_retries = 0");
    let p = dir.join("http.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn behavior_generation_covers_every_utterance_and_is_idempotent() {
    let d = small_fixture(5);
    let out = ok(d.path(), &["generate-behaviors"]);
    assert!(out.contains("coverage 10/10 (100.0%)"), "{out}");
    assert_eq!(line_count(&d.path().join("run/behaviors.jsonl")), 10);
    let again = ok(d.path(), &["generate-behaviors"]);
    assert!(again.contains("generated 0, already cached 10"), "{again}");
    assert_eq!(line_count(&d.path().join("run/behaviors.jsonl")), 10);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("run/run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "generate-behaviors");
    assert_eq!(meta["seeds"]["stage_b"], 0);
    assert_eq!(meta["templates"]["merc"].as_str().unwrap().len(), 64);
    assert!(d.path().join("run/config.toml").is_file());
    assert_eq!(line_count(&d.path().join("run/run_history.jsonl")), 2);
}

#[test]
fn unreachable_endpoint_fails_with_transport_summary() {
    let d = small_fixture(2);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = with_client(d.path(), &format!("[client]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmodel = \"m\"\ntimeout_secs = 5"));
    let err = failing(d.path(), &["--config", cfg.to_str().unwrap(), "generate-behaviors"]);
    assert!(err.contains("4 transport failures"), "{err}");
}

/// Serves OpenAI-style chat completions and records each request.
fn serve(answer: &'static str) -> (u16, Arc<Mutex<Vec<(String, serde_json::Value)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push((head, serde_json::from_slice(&body).unwrap()));
            let reply = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": answer}}]}).to_string();
            let _ = write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len());
        }
    });
    (port, seen)
}

#[test]
fn http_client_with_interpolated_secrets() {
    let d = small_fixture(3);
    let (port, seen) = serve("Facial expression: calm. Body language: still hands. Posture: upright.");
    let cfg = with_client(
        d.path(),
        "[client]\nkind = \"http\"\nendpoint = \"${MERC_TEST_ENDPOINT}\"\nmodel = \"vl-test\"\nauth_token_env = \"MERC_TEST_TOKEN\"",
    );
    let out = Command::new(MERC)
        .current_dir(d.path())
        .env("MERC_TEST_ENDPOINT", format!("http://127.0.0.1:{port}/v1/chat/completions"))
        .env("MERC_TEST_TOKEN", "tok123")
        .args(["--config", cfg.to_str().unwrap(), "generate-behaviors"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("coverage 6/6"));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 6);
    let (head, body) = &seen[0];
    assert!(head.to_ascii_lowercase().contains("authorization: bearer tok123"), "{head}");
    assert_eq!(body["model"], "vl-test");
    let parts = body["messages"][0]["content"].as_array().unwrap();
    assert!(parts.iter().any(|p| p["type"] == "video_url"));
    let snapshot = fs::read_to_string(d.path().join("run/config.toml")).unwrap();
    assert!(snapshot.contains("${MERC_TEST_ENDPOINT}"));

    let err = failing(d.path(), &["--config", cfg.to_str().unwrap(), "generate-behaviors"]);
    assert!(err.contains("MERC_TEST_ENDPOINT"), "{err}");
}

#[test]
fn train_prerequisites_are_named() {
    let d = small_fixture(4);
    let err = failing(d.path(), &["train", "--stage", "align"]);
    assert!(err.contains("merc generate-behaviors"), "{err}");
    ok(d.path(), &["generate-behaviors"]);
    let err = failing(d.path(), &["train", "--stage", "merc"]);
    assert!(err.contains("merc train --stage align") && err.contains("--baseline"), "{err}");
    let err = failing(d.path(), &["evaluate"]);
    assert!(err.contains("merc train --stage merc"), "{err}");
}

#[test]
fn baseline_needs_no_behaviors() {
    let d = small_fixture(4);
    let out = ok(d.path(), &["--baseline", "train", "--stage", "merc"]);
    assert!(out.contains("stage b:"), "{out}");
    assert!(!d.path().join("run/stage_a").exists());
    assert!(d.path().join("run/stage_b/epoch_4/params.bin").is_file());
    let training: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("run/stage_b/training.json")).unwrap()).unwrap();
    assert_eq!(training["baseline"], true);
    let out = ok(d.path(), &["evaluate"]);
    assert!(out.contains("behaviors: none"), "{out}");
}

#[test]
fn full_pipeline_writes_checkpoints_reports_and_plots() {
    let d = small_fixture(8);
    ok(d.path(), &["generate-behaviors"]);
    ok(d.path(), &["train", "--stage", "both"]);
    for stage in ["stage_a", "stage_b"] {
        let dir = d.path().join("run").join(stage);
        assert!(dir.join("epoch_4/params.bin").is_file(), "{stage}");
        assert!(dir.join("run_log.jsonl").is_file());
        assert!(dir.join("report.json").is_file());
    }
    let out = ok(d.path(), &["evaluate", "--split", "test"]);
    assert!(out.contains("(8 examples)"), "{out}");
    let eval = d.path().join("run/eval/test");
    for f in ["predictions.jsonl", "report.json", "report.csv", "embeddings.csv", "label_distribution.svg", "pca.svg", "prompts.jsonl"] {
        assert!(eval.join(f).is_file(), "{f}");
    }
    assert_eq!(line_count(&eval.join("predictions.jsonl")), 8);

    let err = failing(d.path(), &["evaluate", "--split", "dev"]);
    assert!(err.contains("no dev file"), "{err}");
}

#[test]
fn zero_shot_needs_no_checkpoint() {
    let d = small_fixture(4);
    let out = ok(d.path(), &["evaluate", "--zero-shot"]);
    assert!(out.contains("accuracy 1.0000"), "{out}");
    assert!(d.path().join("run/zero_shot/test/report.json").is_file());
    assert_eq!(line_count(&d.path().join("run/zero_shot/test/outcomes.jsonl")), 4);
    assert!(!d.path().join("run/stage_b").exists());
}

#[test]
fn ablation_emits_five_rows() {
    let d = small_fixture(4);
    ok(d.path(), &["generate-behaviors"]);
    ok(d.path(), &["evaluate", "--ablation"]);
    let csv = fs::read_to_string(d.path().join("run/ablation/ablation.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["all", "facial", "body", "posture", "none"]);
    assert!(!d.path().join("run/ablation/none/stage_a").exists());
    assert!(d.path().join("run/ablation/facial/stage_a").exists());
}

#[test]
fn empty_split_and_bad_config_are_errors() {
    let d = small_fixture(2);
    let convo = r#"{"id":"c","utterances":[{"id":"c_u0","speaker":"A","text":"hi","audio_ref":null,"video_ref":null,"label":null,"index":0}]}"#;
    fs::write(d.path().join("empty.jsonl"), format!("{convo}\n")).unwrap();
    let cfg = fs::read_to_string(d.path().join("merc.toml")).unwrap();
    fs::write(d.path().join("empty.toml"), cfg.replace("test = \"train.jsonl\"", "test = \"empty.jsonl\"")).unwrap();
    ok(d.path(), &["--baseline", "train", "--stage", "merc"]);
    let err = failing(d.path(), &["--config", "empty.toml", "evaluate"]);
    assert!(err.contains("no labeled utterances"), "{err}");

    fs::write(d.path().join("missing.toml"), cfg.replace("test = \"train.jsonl\"", "test = \"nope.jsonl\"")).unwrap();
    let err = failing(d.path(), &["--config", "missing.toml", "evaluate"]);
    assert!(err.contains("nope.jsonl") && err.contains("does not exist"), "{err}");

    let err = failing(d.path(), &["--behaviors", "smile", "train"]);
    assert!(err.contains("smile"), "{err}");
}
