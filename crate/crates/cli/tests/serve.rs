use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

/// A `mac serve` child process, killed on drop.
struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(dir: &Path) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mac"))
        .current_dir(dir)
        .args(["serve", "--config", "service.toml", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_owned();
    Server { child, url }
}

fn client(url: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mac"))
        .args(["client", "--url", url])
        .args(args)
        .output()
        .unwrap()
}

fn call(url: &str, args: &[&str]) -> Value {
    let out = client(url, args);
    assert!(
        out.status.success(),
        "client {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for f in ["service.toml", "dialogs.jsonl"] {
        std::fs::copy(fixtures.join(f), dir.path().join(f)).unwrap();
    }
    std::fs::create_dir(dir.path().join("out")).unwrap();
    dir
}

#[test]
fn serve_and_client_round_trip() {
    let dir = workspace();
    let server = start(dir.path());
    let url = server.url.as_str();

    let session = call(url, &["session"]);
    let id = session["session_id"].as_str().unwrap().to_owned();
    assert!(!session["seeded_context"].as_array().unwrap().is_empty());
    assert!(session.get("model").is_none());

    let c = call(url, &["complete", "--session", &id, "--typed", "I would love "]);
    let text = c["suggestion"]["text"].as_str().unwrap();
    assert!(text.starts_with("to"), "{text:?}");
    assert!(c["suggestion"].get("model_id").is_none());

    let a = call(url, &["accept", "--session", &id, "--n", "2"]);
    assert_eq!(a["draft"], "I would love to");
    assert_eq!(a["live_tes"]["chars_typed"], 13);
    assert_eq!(a["live_tes"]["chars_accepted"], 2);

    let r = call(url, &["rate", "--session", &id, "--rating", "7"]);
    assert_eq!(r["rating"], 7);
    assert_eq!(r["final_text"], "I would love to");

    let out = client(url, &["rate", "--session", &id, "--rating", "7"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("409"));
    let out = client(url, &["rate", "--session", &id, "--rating", "-1"]);
    assert!(!out.status.success());

    let report = call(url, &["report"]);
    assert_eq!(report["n_started"], 1);
    assert_eq!(report["n_closed"], 1);
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 1);
    assert_eq!(models[0]["mean_rating"], 7.0);
    assert!((models[0]["mean_tes"].as_f64().unwrap() - 2.0 / 15.0).abs() < 1e-12);
    drop(server);

    // the event log carries the study across a restart
    let server = start(dir.path());
    assert_eq!(call(&server.url, &["report"]), report);
}

#[test]
fn client_reports_unreachable_service() {
    let out = client("http://127.0.0.1:9", &["report"]);
    assert!(!out.status.success());
}
