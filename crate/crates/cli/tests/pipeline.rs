use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// A scratch copy of the fixtures directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixtures()).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    std::fs::create_dir(dir.path().join("out")).unwrap();
    dir
}

fn mac(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mac"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "mac {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prep_build_eval() {
    let dir = workspace();
    let d = dir.path();
    let stats = json(&mac(d, &["stats", "--input", "dialogs.jsonl"]));
    assert_eq!(stats["n_dialogs"], 12, "the out-of-range record is rejected");

    let prep = json(&mac(
        d,
        &[
            "prep", "--input", "dialogs.jsonl", "--output", "out/train.jsonl", "--min-score", "4", "--seed", "42",
        ],
    ));
    assert_eq!(prep["n_bad_records"], 1);
    // the unscored dialog and the one scored 2 are gated out
    assert_eq!(prep["kept_dialogs"], 10);
    assert_eq!(prep["n_samples"], 30);

    mac(d, &["build-mpc", "--input", "out/train.jsonl", "--out", "out/mpc.idx"]);
    mac(
        d,
        &[
            "build-qb", "--input", "out/train.jsonl", "--order", "4", "--prune", "1", "--vocab-size", "200", "--out",
            "out/qb.lm",
        ],
    );

    for (args, id) in [
        (vec!["--model", "out/qb.lm"], "qb"),
        (vec!["--model", "out/mpc.idx"], "mpc"),
        (vec!["--model", "out/mpc.idx", "--kind", "mpcpp"], "mpcpp"),
        (vec!["--config", "models.toml", "--id", "qwen2-vl"], "qwen2-vl"),
    ] {
        let mut full = vec!["eval", "--samples", "out/train.jsonl", "--train", "out/train.jsonl"];
        full.extend(args);
        let report = json(&mac(d, &full));
        assert_eq!(report["model"], id);
        assert_eq!(report["n_seen"], 30, "every training prefix is seen");
        assert_eq!(report["n_unseen"], 0);
        let row = &report["rows"]["all"][0];
        assert_eq!(row["n_samples"], 30);
        if id == "qwen2-vl" {
            assert_eq!(row["sm"], 1.0);
            assert_eq!(row["pr_f1"], 1.0);
        }
    }

    // the index was built from these utterances, so MPC never misses
    mac(
        d,
        &[
            "eval", "--model", "out/mpc.idx", "--samples", "out/train.jsonl", "--mode", "split-point", "--report",
            "out/mpc.json", "--tsv", "out/mpc.tsv",
        ],
    );
    let report = read_json(&d.join("out/mpc.json"));
    assert_eq!(report["config"]["mode"], "split_point");
    assert_eq!(report["rows"]["all"][0]["n_shown"], 30);
    let tsv = std::fs::read_to_string(d.join("out/mpc.tsv")).unwrap();
    assert!(tsv.starts_with("split\tmodel\t"));
    assert_eq!(tsv.lines().count(), 2);
}

#[test]
fn held_out_split_and_synthetic_data() {
    let dir = workspace();
    let d = dir.path();
    mac(d, &["synth", "--dialogs", "80", "--seed", "3", "--out", "out/d.jsonl"]);
    let prep = json(&mac(
        d,
        &[
            "prep", "--input", "out/d.jsonl", "--output", "out/train.jsonl", "--min-score", "1",
            "--test-fraction", "0.25", "--test-output", "out/test.jsonl",
        ],
    ));
    let n_train = prep["n_samples"].as_u64().unwrap();
    let n_test = prep["n_test_samples"].as_u64().unwrap();
    assert!(n_train > 0 && n_test > 0);
    let lines = |p: &str| std::fs::read_to_string(d.join(p)).unwrap().lines().count() as u64;
    assert_eq!((lines("out/train.jsonl"), lines("out/test.jsonl")), (n_train, n_test));

    mac(d, &["build-qb", "--input", "out/train.jsonl", "--order", "4", "--vocab-size", "300", "--out", "out/qb.lm"]);
    let report = json(&mac(
        d,
        &["eval", "--model", "out/qb.lm", "--samples", "out/test.jsonl", "--train", "out/train.jsonl"],
    ));
    let (seen, unseen) = (report["n_seen"].as_u64().unwrap(), report["n_unseen"].as_u64().unwrap());
    assert_eq!(seen + unseen, n_test);
}

#[test]
fn router_label_train_search() {
    let dir = workspace();
    let d = dir.path();
    mac(d, &["prep", "--input", "dialogs.jsonl", "--output", "out/train.jsonl"]);
    mac(d, &["build-mpc", "--input", "out/train.jsonl", "--out", "out/mpc.idx"]);
    mac(
        d,
        &["build-qb", "--input", "out/train.jsonl", "--order", "4", "--prune", "1", "--vocab-size", "200", "--out", "out/qb.lm"],
    );
    let label = json(&mac(
        d,
        &[
            "router-label", "--config", "models.toml", "--samples", "out/train.jsonl", "--models", "qb,mpcpp,qwen2-vl",
            "--out-dir", "out/router",
        ],
    ));
    assert_eq!(label["models"], serde_json::json!(["qb", "mpcpp", "qwen2-vl"]));
    assert_eq!(label["costs"][2], 1.0);
    let shares: f64 = label["label_shares"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((shares - 1.0).abs() < 1e-12);

    let r = d.join("out/router");
    let costs = read_json(&r.join("costs.json"));
    assert_eq!(costs["models"][0]["latency_s"], 0.001);

    let train = json(&mac(&r, &["router-train", "--lambda", "0.5", "--seed", "7", "--hidden", "32", "--epochs", "30"]));
    assert_eq!(train["n_samples"], 30);
    assert!(train["final_loss"].as_f64().unwrap().is_finite());
    assert!(r.join("router.router").exists());

    mac(
        &r,
        &[
            "router-search", "--trials", "2", "--space", "../../search.toml", "--val-fraction", "0.4", "--out",
            "frontier.json", "--csv", "frontier.csv", "--routers-out", "routers",
        ],
    );
    let frontier = read_json(&r.join("frontier.json"));
    // 2 draws for each of the 3 values of λ
    assert_eq!(frontier["trials"].as_array().unwrap().len(), 6);
    assert!(!frontier["frontier"].as_array().unwrap().is_empty());
    let csv = std::fs::read_to_string(r.join("frontier.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(r.join("routers/router-P.router").exists());
    assert!(r.join("routers/router-L.router").exists());

    // the same seed gives the same search
    mac(&r, &["router-search", "--trials", "2", "--space", "../../search.toml", "--val-fraction", "0.4", "--out", "again.json"]);
    assert_eq!(read_json(&r.join("again.json")), frontier);

    // a trained router is one more completer for eval
    std::fs::write(
        d.join("routed.toml"),
        format!(
            "{}\n[[routers]]\nid = \"routed\"\npath = \"out/router/router.router\"\n",
            std::fs::read_to_string(d.join("models.toml")).unwrap()
        ),
    )
    .unwrap();
    let report = json(&mac(d, &["eval", "--config", "routed.toml", "--id", "routed", "--samples", "out/train.jsonl"]));
    assert_eq!(report["model"], "routed");
}

#[test]
fn bench_writes_reports() {
    let dir = workspace();
    let d = dir.path();
    let out = mac(d, &["bench", "--config", "bench.toml"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("split\tmodel\t"));
    let b = d.join("out/bench");
    for f in ["metrics.tsv", "routers.tsv", "report.json", "frontier-router-2.csv", "router-2-P.router"] {
        assert!(b.join(f).exists(), "{f}");
    }
    let report = read_json(&b.join("report.json"));
    let all = report["rows"]["all"].as_array().unwrap();
    let row = |id: &str| all.iter().find(|r| r["model_id"] == id).unwrap().clone();
    assert_eq!(row("qwen2-vl")["pr_f1"], 1.0);
    assert_eq!(row("never")["tr"], 0.0);
    for id in ["mpc", "mpcpp", "qb"] {
        row(id);
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = workspace();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_mac"))
        .current_dir(d)
        .args(["eval", "--model", "dialogs.jsonl", "--samples", "dialogs.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_mac"))
        .current_dir(d)
        .args(["build-mpc", "--input", "missing.jsonl", "--out", "x.idx"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}
