use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lexlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lexlm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(f.path(), &["synth-gen", "--docs", "30", "--seed", "5", "--out", "syn"]);
        ok(
            f.path(),
            &["build-vocab", "--corpus", "syn/documents.jsonl", "--target-size", "300", "--out", "voc"],
        );
        f
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn pretrain(&self, out: &str) -> PathBuf {
        ok(
            self.path(),
            &[
                "pretrain", "--corpus", "syn/documents.jsonl", "--vocab", "voc/vocab.txt", "--epochs", "1",
                "--maxlen", "32", "--set", "model.max_pos=32", "--seed", "9", "--out", out,
            ],
        );
        self.path().join(out)
    }
}

#[test]
fn full_pipeline_produces_a_report() {
    let f = Fixture::new();
    f.pretrain("pre");
    let common = [
        "--corpus", "syn/documents.jsonl", "--vocab", "voc/vocab.txt", "--annotations", "syn/obligation.jsonl",
        "--epochs", "2", "--maxlen", "32",
    ];
    let mut ft = vec!["finetune", "obligation", "--checkpoint", "pre/model.ckpt", "--seed", "1", "--out", "ft"];
    ft.extend(common);
    assert!(ok(f.path(), &ft).contains("obligation test F1"));

    let mut ev = vec!["evaluate", "obligation", "--checkpoint", "pre/model.ckpt", "--seeds", "1,2", "--out", "ev"];
    ev.extend(common);
    ok(f.path(), &ev);
    let mut ev_random = vec![
        "evaluate", "obligation", "--set", "model.max_pos=32", "--seeds", "1,2,3", "--tag", "scratch", "--out", "evr",
    ];
    ev_random.extend(common);
    ok(f.path(), &ev_random);

    let table = ok(f.path(), &["report", "--runs", "ev", "evr", "--out", "rep"]);
    assert!(table.contains("obligation") && table.contains("(±"), "{table}");
    let csv = fs::read_to_string(f.path().join("rep/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,model_tag,seeds,mean_f1,std_f1,single_seed");
    assert!(lines.iter().any(|l| l.starts_with("obligation,model,1;2,")));
    assert!(lines.iter().any(|l| l.starts_with("obligation,scratch,1;2;3,")));
    assert!(fs::read_to_string(f.path().join("rep/timing.csv")).unwrap().contains("predict_ms_per_sample"));

    let m = manifest(&f.path().join("rep"));
    let timing = m["artifacts"].as_array().unwrap().iter().find(|a| a["file"] == "timing.csv").unwrap();
    assert!(timing["sha256"].is_null() && timing["timing"] == true);
}

#[test]
fn retrieval_checkpoint_ranks_snippets() {
    let f = Fixture::new();
    f.pretrain("pre");
    ok(
        f.path(),
        &[
            "finetune", "retrieval", "--corpus", "syn/documents.jsonl", "--vocab", "voc/vocab.txt", "--checkpoint",
            "pre/model.ckpt", "--annotations", "syn/retrieval.jsonl", "--epochs", "1", "--maxlen", "32", "--seed",
            "1", "--out", "ftr",
        ],
    );
    let out = ok(
        f.path(),
        &[
            "rank", "--corpus", "syn/documents.jsonl", "--vocab", "voc/vocab.txt", "--checkpoint", "ftr/model.ckpt",
            "--question", "Who pays for repairs?", "--doc", "synth-0000", "--k", "3", "--out", "rk",
        ],
    );
    assert_eq!(out.lines().filter(|l| l.contains('\t')).count(), 3);
    let rows: Vec<Value> = fs::read_to_string(f.path().join("rk/ranking.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    let scores: Vec<f64> = rows.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn build_vocab_writes_exactly_the_target_size() {
    let f = Fixture::new();
    for (size, mode) in [("250", "unigram"), ("180", "bpe")] {
        let out = format!("v{size}");
        ok(
            f.path(),
            &[
                "build-vocab", "--corpus", "syn/documents.jsonl", "--target-size", size, "--induction", mode, "--out",
                &out,
            ],
        );
        let lines = fs::read_to_string(f.path().join(&out).join("vocab.txt")).unwrap().lines().count();
        assert_eq!(lines.to_string(), size);
    }
}

#[test]
fn merge_hybrid_appends_k_words_to_a_large_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut base: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"].map(String::from).to_vec();
    base.extend((base.len()..28_996).map(|i| format!("base{i}")));
    fs::write(dir.path().join("base.txt"), base.join("\n") + "\n").unwrap();
    let docs: Vec<String> = (0..600)
        .map(|i| {
            let words: Vec<String> = (0..=(i % 7)).map(|_| format!("lexeme{i}")).collect();
            serde_json::json!({ "id": format!("d{i}"), "text": words.join(" ") }).to_string()
        })
        .collect();
    fs::write(dir.path().join("docs.jsonl"), docs.join("\n") + "\n").unwrap();
    ok(
        dir.path(),
        &["merge-hybrid", "--corpus", "docs.jsonl", "--base", "base.txt", "--k", "500", "--out", "mh"],
    );
    let merged = fs::read_to_string(dir.path().join("mh/vocab.txt")).unwrap();
    let lines: Vec<&str> = merged.lines().collect();
    assert_eq!(lines.len(), 29_496);
    assert_eq!(&lines[..28_996], &base.iter().map(String::as_str).collect::<Vec<_>>()[..]);
    let merge: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mh/merge.json")).unwrap()).unwrap();
    assert_eq!(merge["added"], 500);
}

#[test]
fn pretraining_is_reproducible_byte_for_byte() {
    let f = Fixture::new();
    let a = fs::read(f.pretrain("a").join("model.ckpt")).unwrap();
    let b = fs::read(f.pretrain("b").join("model.ckpt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(manifest(&f.path().join("a"))["config_hash"], manifest(&f.path().join("b"))["config_hash"]);
}

#[test]
fn distilled_student_is_smaller() {
    let f = Fixture::new();
    f.pretrain("pre");
    ok(
        f.path(),
        &[
            "distill", "--corpus", "syn/documents.jsonl", "--vocab", "voc/vocab.txt", "--teacher", "pre/model.ckpt",
            "--epochs", "1", "--maxlen", "32", "--seed", "2", "--out", "dis",
        ],
    );
    let e: Value = serde_json::from_str(&fs::read_to_string(f.path().join("dis/epochs.json")).unwrap()).unwrap();
    assert!(e["student_parameters"].as_u64() < e["teacher_parameters"].as_u64());
}
