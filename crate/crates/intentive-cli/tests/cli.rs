//! Drives the installed binary the way a user would: a TOML config in
//! a throwaway directory, flags, and artifacts checked on disk.

use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_intentive");

/// Two-topic micro world and a 2-layer encoder: full runs in well
/// under a second, single phase unless a flag says otherwise.
const MICRO_CONFIG: &str = r#"
phases = 1
refinement = false
refine_per_instruction = 2
seed = 7
prune = []

[encoder]
num_layers = 2
hidden_dim = 8
num_heads = 2
intermediate_dim = 16
vocab_size = 0
max_len = 12

[train]
batch_size = 8
learning_rate = 1e-3
alpha = 0.5
m_instr = 2
hard_negatives = 1
epochs_per_phase = 1
seed = 7

[world]
topics = ["stars", "cells"]
formats = ["article"]
relations = ["answers", "counters"]
docs_per_topic = 8
queries_per_instruction = 6
ambiguous_fraction = 0.5
validation_fraction = 0.34
seed = 7
"#;

struct Run {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup() -> Run {
    let tmp = TempDir::new().expect("tempdir");
    let root = tmp.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, MICRO_CONFIG).expect("write config");
    Run { _tmp: tmp, root, config }
}

impl Run {
    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.current_dir(&self.root)
            .arg("--config")
            .arg(&self.config)
            .arg("--run-dir")
            .arg(self.root.join("run"))
            .args(args);
        c
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args).output().expect("spawn binary");
        assert_success(&out, args);
        String::from_utf8(out.stdout).expect("utf8 stdout")
    }

    /// Runs to a nonzero exit and returns stderr.
    fn fail(&self, args: &[&str]) -> String {
        let out = self.cmd(args).output().expect("spawn binary");
        assert!(
            !out.status.success(),
            "{args:?} unexpectedly succeeded:\n{}",
            String::from_utf8_lossy(&out.stdout)
        );
        String::from_utf8(out.stderr).expect("utf8 stderr")
    }

    fn data(&self) -> PathBuf {
        self.root.join("run/data")
    }
    fn checkpoints(&self) -> PathBuf {
        self.root.join("run/checkpoints")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("run/reports")
    }
    fn final_ckpt(&self) -> String {
        self.checkpoints().join("final.ckpt").display().to_string()
    }
}

fn assert_success(out: &Output, args: &[&str]) {
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .collect()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let r = setup();
    for dir in ["a", "b"] {
        let out = Command::new(BIN)
            .current_dir(&r.root)
            .arg("--config")
            .arg(&r.config)
            .arg("--run-dir")
            .arg(r.root.join(dir))
            .arg("gen-data")
            .output()
            .expect("spawn binary");
        assert_success(&out, &["gen-data", dir]);
        assert!(String::from_utf8_lossy(&out.stdout)
            .contains("wrote 4 instructions, 24 pairs, 24 qrels"));
    }
    for file in ["instructions.jsonl", "pairs.jsonl", "qrels.jsonl"] {
        let a = fs::read(r.root.join("a/data").join(file)).expect("run a file");
        let b = fs::read(r.root.join("b/data").join(file)).expect("run b file");
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn train_writes_checkpoints_traces_reports_and_manifest() {
    let r = setup();
    r.ok(&["gen-data"]);
    let stdout = r.ok(&["train", "--phases", "2", "--refinement", "true"]);
    assert!(stdout.contains("phase 1:"));
    assert!(stdout.contains("phase 2:"));
    assert!(stdout.contains("final checkpoint:"));

    for p in [1usize, 2] {
        assert!(r.checkpoints().join(format!("phase-{p}.ckpt")).exists());
        let trace = jsonl(&r.checkpoints().join(format!("trace-phase-{p}.jsonl")));
        assert!(!trace.is_empty());
        for (i, t) in trace.iter().enumerate() {
            assert_eq!(t["step"].as_u64(), Some(i as u64));
            assert!(t["total"].as_f64().expect("total loss").is_finite());
        }
        let eval = jsonl(&r.reports().join(format!("eval-phase-{p}.jsonl")));
        assert_eq!(eval.len(), 5, "4 instruction lines plus a summary");
        assert_eq!(eval[4]["treatment"], "correct");
        assert_eq!(eval[4]["num_instructions"], 4);
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.checkpoints().join("manifest.json")).unwrap())
            .expect("manifest parses");
    assert_eq!(manifest["phases_completed"], 2);
    assert_eq!(manifest["seed"], 7);
    let sizes = manifest["train_sizes"].as_array().expect("train_sizes");
    assert_eq!(sizes[0], 16);
    let second = sizes[1].as_u64().expect("phase-2 size") as usize;
    assert!(second > 16, "refinement should have grown the train split");
    let refinements = manifest["refinement_events"].as_array().expect("events");
    assert_eq!(refinements.len(), 1);
    assert_eq!(refinements[0]["after_phase"], 1);
    assert_eq!(refinements[0]["added_pairs"].as_u64().unwrap() as usize, second - 16);
    assert_eq!(manifest["prune_events"].as_array().map(Vec::len), Some(0));

    let appended = jsonl(&r.data().join("refinement_pairs.jsonl"));
    assert_eq!(appended.len(), second - 16);
    assert!(appended.iter().all(|p| p["split"] == "train"));

    // No pruning after the last phase, so the final model is the
    // phase-2 snapshot under the same manifest.
    let phase2 = fs::read(r.checkpoints().join("phase-2.ckpt")).unwrap();
    let fin = fs::read(r.checkpoints().join("final.ckpt")).unwrap();
    assert_eq!(phase2, fin);
}

#[test]
fn eval_scores_a_checkpoint_under_each_treatment() {
    let r = setup();
    r.ok(&["gen-data"]);
    r.ok(&["train"]);
    let ckpt = r.final_ckpt();
    for t in ["correct", "rewrite", "remove", "incorrect"] {
        let stdout = r.ok(&["eval", "--checkpoint", &ckpt, "--treatment", t]);
        assert!(stdout.contains(t));
        let lines = jsonl(&r.reports().join(format!("eval-{t}.jsonl")));
        assert_eq!(lines.len(), 5);
        for line in &lines[..4] {
            assert!(line["instruction_id"].as_str().expect("id").starts_with("inst-"));
            let s = line["ndcg10"].as_f64().expect("score");
            assert!((0.0..=1.0).contains(&s));
        }
        let summary = &lines[4];
        assert_eq!(summary["treatment"], t);
        assert_eq!(summary["num_instructions"], 4);
        let macro_avg = summary["macro_ndcg10"].as_f64().expect("macro");
        assert!((0.0..=1.0).contains(&macro_avg));
    }

    let custom = r.root.join("elsewhere.jsonl");
    r.ok(&[
        "eval",
        "--checkpoint",
        &ckpt,
        "--treatment",
        "correct",
        "--out",
        custom.to_str().unwrap(),
    ]);
    assert_eq!(jsonl(&custom).len(), 5);

    let err = r.fail(&["eval", "--checkpoint", &ckpt, "--treatment", "sideways"]);
    assert!(err.contains("sideways"));
}

#[test]
fn bench_measures_relative_query_throughput() {
    let r = setup();
    r.ok(&["gen-data"]);
    r.ok(&["train"]);
    let a = r.checkpoints().join("phase-1.ckpt").display().to_string();
    let b = r.final_ckpt();
    r.ok(&["bench", "--checkpoint-a", &a, "--checkpoint-b", &b, "--queries", "1000"]);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.reports().join("bench.json")).unwrap())
            .expect("bench report parses");
    assert_eq!(report["num_encodes"], 1000);
    let qps_a = report["qps_a"].as_f64().expect("qps_a");
    let qps_b = report["qps_b"].as_f64().expect("qps_b");
    assert!(qps_a > 0.0 && qps_b > 0.0);
    let ratio = report["ratio_b_over_a"].as_f64().expect("ratio");
    assert!((ratio - qps_b / qps_a).abs() <= 1e-9 * ratio);
    // Identical architectures, so the ratio is noise around 1.
    assert!((0.2..=5.0).contains(&ratio), "ratio {ratio} is implausible");

    // A differently seeded run has different base weights; comparing
    // across bases is refused.
    let out = Command::new(BIN)
        .current_dir(&r.root)
        .arg("--config")
        .arg(&r.config)
        .arg("--run-dir")
        .arg(r.root.join("other"))
        .args(["--seed", "9"])
        .arg("gen-data")
        .output()
        .unwrap();
    assert_success(&out, &["gen-data --seed 9"]);
    let out = Command::new(BIN)
        .current_dir(&r.root)
        .arg("--config")
        .arg(&r.config)
        .arg("--run-dir")
        .arg(r.root.join("other"))
        .args(["--seed", "9"])
        .arg("train")
        .output()
        .unwrap();
    assert_success(&out, &["train --seed 9"]);
    let foreign = r.root.join("other/checkpoints/final.ckpt").display().to_string();
    let err = r.fail(&["bench", "--checkpoint-a", &a, "--checkpoint-b", &foreign]);
    assert!(err.contains("same base encoder"), "unexpected stderr: {err}");
}

#[test]
fn report_collects_phase_loss_and_ablation_tables() {
    let r = setup();
    r.ok(&["gen-data"]);
    r.ok(&["train", "--phases", "2", "--refinement", "true"]);
    let ckpt = r.final_ckpt();
    r.ok(&["eval", "--checkpoint", &ckpt, "--treatment", "correct"]);
    r.ok(&["eval", "--checkpoint", &ckpt, "--treatment", "remove"]);
    r.ok(&["report"]);

    let phase = fs::read_to_string(r.reports().join("phase_ndcg.tsv")).unwrap();
    let rows: Vec<&str> = phase.lines().collect();
    assert_eq!(rows[0], "phase\tmacro_ndcg10\ttrain_size");
    assert_eq!(rows.len(), 3);
    let first: Vec<&str> = rows[1].split('\t').collect();
    assert_eq!(first[0], "1");
    assert!(first[1].parse::<f64>().unwrap().is_finite());
    assert_eq!(first[2], "16");
    assert!(rows[2].starts_with("2\t"));

    let loss = fs::read_to_string(r.reports().join("loss_curve.tsv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows[0], "phase\tstep\tl1\tl2\ttotal");
    assert!(rows.len() > 2, "expected steps from both phases");
    for row in &rows[1..] {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), 5);
        assert!(matches!(cols[0], "1" | "2"));
        assert!(cols[4].parse::<f64>().unwrap().is_finite());
    }

    let ablation = fs::read_to_string(r.reports().join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = ablation.lines().collect();
    assert_eq!(rows[0], "treatment\tmacro_ndcg10\tnum_instructions");
    assert_eq!(rows.len(), 3, "one row per treatment evaluated so far");
    assert!(rows[1].starts_with("correct\t"));
    assert!(rows[2].starts_with("remove\t"));
}

#[test]
fn gen_data_llm_requires_the_endpoint_variable() {
    let r = setup();
    let out = r
        .cmd(&["gen-data", "--llm"])
        .env_remove("INTENTIVE_LLM_ENDPOINT")
        .output()
        .expect("spawn binary");
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "unexpected stderr: {err}");
    assert!(err.contains("INTENTIVE_LLM_ENDPOINT"));
    assert!(!r.data().join("instructions.jsonl").exists());
}

/// One-shot text endpoint: instruction prompts get a JSON-wrapped
/// reply, pair prompts a raw text body, exercising both reply forms
/// the client accepts.
fn spawn_text_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("local addr");
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 1024];
            let header_end = loop {
                match stream.read(&mut chunk) {
                    Ok(0) | Err(_) => break None,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
                if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break Some(i + 4);
                }
            };
            let Some(header_end) = header_end else { continue };
            let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
            let mut content_length = 0usize;
            for line in head.lines() {
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
            while buf.len() < header_end + content_length {
                match stream.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                }
            }
            let body = String::from_utf8_lossy(&buf[header_end..]).to_string();
            let prompt = serde_json::from_str::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v.get("prompt").and_then(|p| p.as_str()).map(str::to_string))
                .unwrap_or_default();
            let (content_type, reply) = canned_reply(&prompt);
            let response = format!(
                "HTTP/1.0 200 OK\r\nContent-Type: {content_type}\r\n\
                 Content-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    format!("http://{addr}/complete")
}

fn canned_reply(prompt: &str) -> (&'static str, String) {
    if prompt.contains("generate a pair of query") {
        // The instruction under generation is the prompt's last line.
        let inst = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let words: Vec<&str> = inst.split_whitespace().collect();
        let topic = words.get(2).copied().unwrap_or("misc");
        let relation = words.get(5).copied().unwrap_or("about");
        let reply = format!(
            "Query: what {relation} {topic} alpha\n\
             Retrieved text: {topic} article {relation} alpha body\n\
             Query: what {relation} {topic} beta\n\
             Document: {topic} article {relation} beta body\n"
        );
        ("text/plain", reply)
    } else {
        let text = "retrieve a stars article that answers the query\n\
                    retrieve a stars article that counters the query\n\
                    retrieve a cells article that answers the query\n\
                    retrieve a cells article that counters the query";
        ("application/json", serde_json::json!({ "text": text }).to_string())
    }
}

#[test]
fn gen_data_llm_round_trips_a_local_endpoint() {
    let r = setup();
    let endpoint = spawn_text_endpoint();
    let out = r
        .cmd(&["gen-data", "--llm"])
        .env("INTENTIVE_LLM_ENDPOINT", &endpoint)
        .output()
        .expect("spawn binary");
    assert_success(&out, &["gen-data --llm"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 4 instructions, 8 pairs, 8 qrels"));

    let instructions = jsonl(&r.data().join("instructions.jsonl"));
    assert_eq!(instructions.len(), 4);
    for rec in &instructions {
        assert!(rec["id"].as_str().unwrap().starts_with("inst-llm-"));
        assert!(matches!(rec["topic"].as_str().unwrap(), "stars" | "cells"));
        assert!(matches!(rec["relation"].as_str().unwrap(), "answers" | "counters"));
    }
    let pairs = jsonl(&r.data().join("pairs.jsonl"));
    assert_eq!(pairs.len(), 8);
    let qrels = jsonl(&r.data().join("qrels.jsonl"));
    assert_eq!(qrels.len(), 8);
    for q in &qrels {
        assert_eq!(q["gold_document_ids"].as_array().map(Vec::len), Some(1));
    }
}

#[test]
fn config_and_flag_errors_exit_nonzero_with_a_diagnostic() {
    let r = setup();

    let bad = r.root.join("bad.toml");
    fs::write(&bad, "nonsense = 1\n").unwrap();
    let out = Command::new(BIN)
        .current_dir(&r.root)
        .arg("--config")
        .arg(&bad)
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.starts_with("error:"), "unexpected stderr: {err}");
    assert!(err.contains("nonsense"));

    let out = Command::new(BIN)
        .current_dir(&r.root)
        .arg("--config")
        .arg(r.root.join("missing.toml"))
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let err = r.fail(&["train", "--phases", "0"]);
    assert!(err.contains("phase"), "unexpected stderr: {err}");

    // Valid config but no generated data to train on.
    let err = r.fail(&["train"]);
    assert!(err.starts_with("error:"), "unexpected stderr: {err}");
}

#[test]
fn run_dir_rebases_while_specific_dir_flags_win() {
    let r = setup();
    let alt = r.root.join("elsewhere");
    let out = r
        .cmd(&["--data-dir", alt.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_success(&out, &["gen-data --data-dir"]);
    assert!(alt.join("instructions.jsonl").exists());
    assert!(!r.data().join("instructions.jsonl").exists());

    // Training against the overridden data dir still rebases the
    // checkpoint and report dirs under the run dir.
    let out = r
        .cmd(&["--data-dir", alt.to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert_success(&out, &["train --data-dir"]);
    assert!(r.checkpoints().join("final.ckpt").exists());
    assert!(r.reports().join("eval-phase-1.jsonl").exists());
    assert!(alt.join("refinement_pairs.jsonl").exists());
}
