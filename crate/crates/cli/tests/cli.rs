use std::path::Path;
use std::process::{Command, Output};

fn qgat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn qgat")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small run config: 6 episodes and a reduced model.
fn write_config(dir: &Path) {
    let cfg = serde_json::json!({
        "model": {"hidden_dim": 16, "num_heads": 2, "edge_type_embed_dim": 4, "fusion_dims": [16, 8]},
        "train": {"stage1_epochs": 1, "stage2_epochs": 2},
        "embed_dim": 16,
        "toy_embed": true
    });
    std::fs::write(dir.join("cfg.json"), cfg.to_string()).unwrap();
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

#[test]
fn end_to_end_script() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let c = ["--config", "cfg.json"];
    ok(&qgat(
        d,
        &[&c[..], &["ingest", "--make-synthetic", "6"]].concat(),
    ));
    assert!(d.join("run/corpus.normalized.jsonl").exists());
    let corpus_before = std::fs::read(d.join("run/corpus.jsonl")).unwrap();

    let o = qgat(d, &[&c[..], &["build-graph", "--dump"]].concat());
    ok(&o);
    assert!(stdout(&o).contains("6 graphs, 120 nodes, 228 sequential"));
    assert!(d.join("run/graphs/ep000.jsonl").exists());

    ok(&qgat(d, &[&c[..], &["train", "--stage", "all"]].concat()));
    assert!(d.join("run/stage1.qgat").exists());
    assert!(d.join("run/model.qgat").exists());
    let log = std::fs::read_to_string(d.join("run/train_log_stage2.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["stage"], 2);

    ok(&qgat(d, &[&c[..], &["fuse-fit"]].concat()));
    assert!(d.join("run/fusion.json").exists());
    let o = qgat(d, &[&c[..], &["eval"]].concat());
    ok(&o);
    assert!(stdout(&o).contains("Flat cosine"));
    let report = std::fs::read(d.join("run/eval_report.json")).unwrap();

    ok(&qgat(d, &[&c[..], &["eval"]].concat()));
    assert_eq!(
        std::fs::read(d.join("run/eval_report.json")).unwrap(),
        report
    );
    assert_eq!(
        std::fs::read(d.join("run/corpus.jsonl")).unwrap(),
        corpus_before
    );

    let o = qgat(
        d,
        &[&c[..], &["retrieve", "--text", "some words", "--toy-embed"]].concat(),
    );
    ok(&o);
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["rank"], i + 1);
        for key in [
            "episode_id",
            "chunk_id",
            "idx_score",
            "graph_score",
            "adjusted_score",
            "gnn_score",
            "fused_score",
        ] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
    }
    let o = qgat(
        d,
        &[&c[..], &["retrieve", "--query-id", "q0000", "--top-n", "3"]].concat(),
    );
    ok(&o);
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn stage2_without_backbone_is_missing_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    ok(&qgat(
        d,
        &["--config", "cfg.json", "ingest", "--make-synthetic", "4"],
    ));
    let o = qgat(d, &["--config", "cfg.json", "train", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("MissingBackbone"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--stage", "3"][..],
        &["retrieve"],
        &["frobnicate"],
        &["retrieve", "--text", "a", "--query-id", "b"],
    ] {
        assert_eq!(qgat(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn data_errors_exit_1_with_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.jsonl"), "{not json}\n").unwrap();
    let o = qgat(d, &["--corpus", "bad.jsonl", "ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ParseError"), "{}", stderr(&o));

    let o = qgat(d, &["--tau", "1.5", "config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("InvalidConfig"));

    write_config(d);
    ok(&qgat(
        d,
        &["--config", "cfg.json", "ingest", "--make-synthetic", "4"],
    ));
    let o = qgat(d, &["--config", "cfg.json", "retrieve", "--text", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ModelNotLoaded"));
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let o = qgat(
        d,
        &[
            "--config", "cfg.json", "--tau", "0.5", "--seed", "7", "--top-n", "9", "config",
        ],
    );
    ok(&o);
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["graph"]["tau"], 0.5);
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["retrieval"]["top_n"], 9);
    assert_eq!(cfg["embed_dim"], 16);
    assert_eq!(cfg["graph"]["k"], 5);
}
