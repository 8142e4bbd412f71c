use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn celljepa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_celljepa"))
        .args(args)
        .current_dir(dir)
        .env("CELLJEPA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = celljepa(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed one-line error.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = celljepa(dir, args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    let code = out.status.code().unwrap();
    assert_eq!(err["code"], code);
    (code, err)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "n_types=3",
    "--set",
    "cells_per_type=30",
    "--set",
    "n_genes=80",
    "--set",
    "signature_size=10",
];

fn small_corpus(dir: &Path, name: &str) {
    let mut args = vec!["synth", "--seed", "3", "--out", name];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

const TINY_MODEL: &[&str] = &[
    "--set",
    "encoder.d_model=8",
    "--set",
    "encoder.n_layers=1",
    "--set",
    "encoder.l_max=24",
    "--set",
    "epochs=2",
];

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let t = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(t.path(), &["synth", "--set", "seed=7", "--set", "cells_per_type=20", "--out", name]);
    }
    for f in ["matrix.mtx", "genes.tsv", "cells.tsv", "config.json"] {
        assert_eq!(fs::read(t.path().join("a").join(f)).unwrap(), fs::read(t.path().join("b").join(f)).unwrap(), "{f}");
    }
    let echo = read_json(&t.path().join("a/config.json"));
    assert_eq!(echo["seed"], 7);
    assert_eq!(echo["cells_per_type"], 20);
    assert_eq!(echo["n_genes"], 500);

    ok(t.path(), &["synth", "--set", "seed=8", "--set", "cells_per_type=20", "--out", "c"]);
    assert_ne!(fs::read(t.path().join("a/matrix.mtx")).unwrap(), fs::read(t.path().join("c/matrix.mtx")).unwrap());
}

#[test]
fn eval_cluster_on_one_hot_embeddings_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let mut tsv = String::from("cell_id\tlabel\te_0\te_1\te_2\n");
    for i in 0..60 {
        let c = i % 3;
        let row: Vec<&str> = (0..3).map(|d| if d == c { "1" } else { "0" }).collect();
        tsv.push_str(&format!("c{i}\tt{c}\t{}\n", row.join("\t")));
    }
    fs::write(t.path().join("e.tsv"), tsv).unwrap();
    ok(t.path(), &["eval-cluster", "--seed", "0", "--embeddings", "e.tsv", "--out", "r.json"]);
    let r = read_json(&t.path().join("r.json"));
    assert_eq!(r["NMI_cell"], 1.0);
    assert_eq!(r["ARI_cell"], 1.0);
    assert_eq!(r["n_clusters"], 3.0);
    assert_eq!(read_json(&t.path().join("r.json.config.json"))["k"], 15);
}

#[test]
fn usage_errors_exit_one_and_leave_nothing() {
    let t = tempfile::tempdir().unwrap();
    let (code, err) = fails(t.path(), &["synth", "--out", "x"]);
    assert_eq!((code, err["error"].as_str()), (1, Some("usage")));
    assert!(err["message"].as_str().unwrap().contains("--seed"));

    let (code, err) = fails(t.path(), &["synth", "--seed", "1", "--set", "n_gens=3", "--out", "x"]);
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("n_gens"));

    let (code, _) = fails(t.path(), &["synth", "--seed", "1", "--set", "dropout_rate=2", "--out", "x"]);
    assert_eq!(code, 1);
    let (code, _) = fails(t.path(), &["pretrain", "--seed", "1", "--data", "missing", "--out", "x"]);
    assert_eq!(code, 1);
    let (code, _) = fails(t.path(), &["frobnicate"]);
    assert_eq!(code, 1);
    assert!(!t.path().join("x").exists());

    small_corpus(t.path(), "d");
    let (code, err) = fails(t.path(), &["synth", "--seed", "1", "--out", "d"]);
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("--force"));
    ok(t.path(), &["synth", "--seed", "1", "--set", "cells_per_type=5", "--force", "--out", "d"]);
}

#[test]
fn config_file_then_overrides() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), r#"{"seed": 4, "n_types": 2, "cells_per_type": 9, "n_genes": 50, "signature_size": 5}"#).unwrap();
    ok(t.path(), &["synth", "--config", "c.json", "--set", "cells_per_type=11", "--out", "a"]);
    let echo = read_json(&t.path().join("a/config.json"));
    assert_eq!((echo["seed"].as_u64(), echo["n_types"].as_u64(), echo["cells_per_type"].as_u64()), (Some(4), Some(2), Some(11)));
    assert_eq!(fs::read_to_string(t.path().join("a/cells.tsv")).unwrap().lines().count(), 1 + 22);

    fs::write(t.path().join("nested.json"), r#"{"encoder": {"d_model": 8}}"#).unwrap();
    let (code, _) = fails(t.path(), &["synth", "--seed", "1", "--config", "nested.json", "--out", "b"]);
    assert_eq!(code, 1);
}

#[test]
fn data_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("broken")).unwrap();
    fs::write(t.path().join("broken/genes.tsv"), "G0\n").unwrap();
    let (code, err) = fails(t.path(), &["pretrain", "--seed", "1", "--data", "broken", "--out", "m"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("data")));
    assert!(!t.path().join("m").exists());

    fs::write(t.path().join("e.tsv"), "cell_id\tlabel\te_0\nc0\ta\tnan\n").unwrap();
    let (code, _) = fails(t.path(), &["eval-cluster", "--seed", "0", "--embeddings", "e.tsv", "--out", "r.json"]);
    assert_eq!(code, 2);
    assert!(!t.path().join("r.json").exists());
}

#[test]
fn pretrain_embed_and_finetune_are_reproducible() {
    let t = tempfile::tempdir().unwrap();
    small_corpus(t.path(), "d");
    for name in ["m1", "m2"] {
        let mut args = vec!["pretrain", "--seed", "5", "--data", "d", "--out", name];
        args.extend_from_slice(TINY_MODEL);
        ok(t.path(), &args);
    }
    for f in ["params.bin", "manifest.json", "log.jsonl", "config.json"] {
        assert_eq!(fs::read(t.path().join("m1").join(f)).unwrap(), fs::read(t.path().join("m2").join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(t.path().join("m1/log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r["loss"].is_f64() && r["lr"].is_f64() && r["terms"]["jepa"].is_f64()));
    assert_eq!(fs::read_to_string(t.path().join("m1/timing.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(read_json(&t.path().join("m1/config.json"))["encoder.d_model"], 8);

    ok(t.path(), &["embed", "--seed", "0", "--set", "cells=held-out", "--data", "d", "--checkpoint", "m1", "--out", "e.tsv"]);
    ok(t.path(), &["embed", "--seed", "0", "--set", "cells=held-out", "--data", "d", "--checkpoint", "m2", "--out", "f.tsv"]);
    let e = fs::read_to_string(t.path().join("e.tsv")).unwrap();
    assert_eq!(e, fs::read_to_string(t.path().join("f.tsv")).unwrap());
    assert_eq!(e.lines().count(), 1 + 9);
    assert_eq!(e.lines().next().unwrap().split('\t').count(), 2 + 8);
    ok(t.path(), &["eval-cluster", "--seed", "0", "--set", "k=3", "--embeddings", "e.tsv", "--out", "r.json"]);
    assert!(read_json(&t.path().join("r.json"))["AvgBIO"].is_f64());

    ok(t.path(), &["finetune", "--seed", "6", "--set", "epochs=1", "--data", "d", "--checkpoint", "m1", "--out", "ft"]);
    assert_eq!(read_json(&t.path().join("ft/manifest.json"))["config"]["mask_ratio"], 0.4);
    let (code, _) = fails(t.path(), &["finetune", "--seed", "6", "--set", "encoder.d_model=16", "--data", "d", "--checkpoint", "m1", "--out", "x"]);
    assert_eq!(code, 1);
}

#[test]
fn non_finite_loss_exits_three_and_cleans_up() {
    let t = tempfile::tempdir().unwrap();
    small_corpus(t.path(), "d");
    let mut args = vec!["pretrain", "--seed", "5", "--set", "learning_rate=1e300", "--data", "d", "--out", "m"];
    args.extend_from_slice(TINY_MODEL);
    let (code, err) = fails(t.path(), &args);
    assert_eq!((code, err["error"].as_str()), (3, Some("numerical")));
    assert!(!t.path().join("m").exists());
}

#[test]
fn perturbation_train_and_evaluate() {
    let t = tempfile::tempdir().unwrap();
    ok(
        t.path(),
        &[
            "synth", "--seed", "0", "--set", "n_types=1", "--set", "cells_per_type=110", "--set", "n_genes=30", "--set",
            "signature_size=0", "--set", "expression_scale=8", "--set", "dropout_rate=0", "--set", "n_perturbations=10",
            "--set", "perturbed_genes=1", "--set", "effect_size=2", "--out", "d",
        ],
    );
    let mut args = vec!["perturb-train", "--seed", "1", "--data", "d", "--out", "m"];
    args.extend_from_slice(TINY_MODEL);
    ok(t.path(), &args);
    let split = read_json(&t.path().join("m/split.json"));
    assert_eq!(split["held_out"].as_array().unwrap().len(), 1);
    assert_eq!(split["train"].as_array().unwrap().len(), 9);
    assert_eq!(read_json(&t.path().join("m/manifest.json"))["panel"].as_array().unwrap().len(), 24);

    ok(t.path(), &["eval-perturb", "--data", "d", "--checkpoint", "m", "--out", "r.json"]);
    let r = read_json(&t.path().join("r.json"));
    assert_eq!(r["n_perturbations"], 1.0);
    for m in ["pearson", "pearson_de", "top20_de_non_dropout", "pearson_delta", "pearson_de_delta", "delta_top20_de_non_dropout"] {
        assert!(r.get(m).is_some(), "{m}");
        assert!(r.get(format!("{m}_n_excluded")).is_some(), "{m}");
    }
    ok(t.path(), &["eval-perturb", "--set", "perturbations=all", "--data", "d", "--checkpoint", "m", "--out", "all.json"]);
    assert_eq!(read_json(&t.path().join("all.json"))["n_perturbations"], 10.0);

    let (code, _) = fails(t.path(), &["eval-perturb", "--data", "d", "--checkpoint", "d", "--out", "x.json"]);
    assert_eq!(code, 2);
}

#[test]
fn compare_runs_both_arms_on_shared_data() {
    let t = tempfile::tempdir().unwrap();
    small_corpus(t.path(), "d");
    let out = ok(
        t.path(),
        &[
            "compare", "--seed", "2", "--set", "pretrain.epochs=1", "--set", "pretrain.encoder.d_model=8", "--set",
            "pretrain.encoder.l_max=24", "--set", "k=3", "--data", "d", "--out", "c",
        ],
    );
    assert!(out.starts_with("# zero-shot"));
    assert!(out.contains("jepa") && out.contains("scgpt-baseline") && out.contains("AvgBIO"));
    let doc = read_json(&t.path().join("c/compare.json"));
    assert_eq!(doc["task"], "zero-shot");
    for arm in ["jepa", "scgpt-baseline"] {
        assert!(doc[arm]["AvgBIO"].is_f64());
        let manifest = read_json(&t.path().join("c").join(arm).join("manifest.json"));
        assert_eq!(manifest["mode"], arm);
        assert_eq!(manifest["config"]["seed"], 2);
        assert_eq!(fs::read_to_string(t.path().join("c").join(arm).join("embeddings.tsv")).unwrap().lines().count(), 1 + 9);
    }
    assert_eq!(fs::read_to_string(t.path().join("c/table.txt")).unwrap(), out);
}
