use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("spangate-cli-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("schema.in.json"), r#"{"task":"NER","labels":["Person","Location"]}"#).unwrap();
        Scratch(dir)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with_stdin(args, None)
    }

    fn run_with_stdin(&self, args: &[&str], stdin: Option<&str>) -> Output {
        let mut child = Command::new(env!("CARGO_BIN_EXE_spangate"))
            .args(args)
            .current_dir(&self.0)
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        if let Some(text) = stdin {
            child.stdin.take().unwrap().write_all(text.as_bytes()).unwrap();
        }
        child.wait_with_output().unwrap()
    }

    fn corpus(&self, records: usize) {
        let out = self.run(&["gen-synthetic", "--schema", "schema.in.json", "--out", "d", "--records", &records.to_string()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn stats_table_matches_written_files() {
    let s = Scratch::new("stats");
    s.corpus(80);
    let table = std::fs::read_to_string(s.path("d/stats.txt")).unwrap();
    for split in ["train", "dev", "test"] {
        let row = table.lines().find(|l| l.starts_with(split) && !l.contains("Sum")).unwrap();
        let counts: Vec<usize> = row.split_whitespace().skip(2).map(|n| n.parse().unwrap()).collect();
        for (stage, n) in ["sft", "rm", "rl"].iter().zip(counts) {
            assert_eq!(lines(&s.path(&format!("d/{stage}.{split}.jsonl"))).len(), n, "{stage}.{split}");
        }
    }
}

#[test]
fn missing_schema_names_the_path() {
    let s = Scratch::new("noschema");
    let out = s.run(&["gen-synthetic", "--schema", "absent.json", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.json"), "{}", stderr(&out));
}

#[test]
fn bad_flags_are_usage_errors() {
    let s = Scratch::new("usage");
    assert_eq!(s.run(&["train", "--stage", "ppo", "--in", "d"]).status.code(), Some(1));
    assert_eq!(s.run(&["gen-synthetic", "--schema", "schema.in.json", "--out", "d", "--skew", "1.5"]).status.code(), Some(1));
    assert_eq!(s.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn later_stages_require_earlier_checkpoints() {
    let s = Scratch::new("order");
    s.corpus(30);
    let out = s.run(&["train", "--stage", "rl", "--in", "d"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("run `train --stage sft` first"), "{}", stderr(&out));
    let out = s.run(&["train", "--stage", "rm", "--in", "d"]);
    assert!(stderr(&out).contains("run `train --stage sft` first"), "{}", stderr(&out));
}

#[test]
fn rm_stage_logs_pairwise_accuracy_per_epoch() {
    let s = Scratch::new("rmlog");
    s.corpus(40);
    assert!(s.run(&["train", "--stage", "sft", "--in", "d", "--epochs", "2"]).status.success());
    let out = s.run(&["train", "--stage", "rm", "--in", "d", "--epochs", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = lines(&s.path("d/rm.log.jsonl"));
    assert_eq!(log.len(), 3);
    for row in &log {
        let acc = row["pairwise_accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(log[2]["held_out_accuracy"].is_number());
    assert!(stdout(&out).contains("held-out pairwise accuracy"));
}

#[test]
fn noise_decode_with_constraints_is_always_valid() {
    let s = Scratch::new("noise");
    s.corpus(60);
    let out = s.run(&["decode", "--in", "d/sft.train.jsonl", "--out", "p.jsonl", "--seed", "9"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let preds = lines(&s.path("p.jsonl"));
    assert_eq!(preds.len(), lines(&s.path("d/sft.train.jsonl")).len());
    assert!(preds.iter().all(|p| p["valid"] == Value::Bool(true)));
    assert!(stdout(&out).starts_with(&format!("decoded {} records: {} valid", preds.len(), preds.len())));
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let s = Scratch::new("evalgold");
    s.corpus(40);
    let preds: String = lines(&s.path("d/sft.dev.jsonl"))
        .into_iter()
        .map(|mut r| {
            r["valid"] = Value::Bool(true);
            r["truncated"] = Value::Bool(false);
            format!("{r}\n")
        })
        .collect();
    std::fs::write(s.path("gold_preds.jsonl"), preds).unwrap();
    let out = s.run(&["eval", "--in", "gold_preds.jsonl", "--gold", "d/sft.dev.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reports: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let reports = reports.as_array().unwrap();
    assert!(!reports.is_empty());
    for r in reports {
        assert_eq!(r["f1"].as_f64(), Some(1.0), "{r}");
        assert_eq!(r["fp"].as_u64(), Some(0));
    }
}

#[test]
fn eval_count_mismatch_names_both_counts() {
    let s = Scratch::new("evalcount");
    s.corpus(60);
    assert!(s.run(&["decode", "--in", "d/sft.dev.jsonl", "--out", "p.jsonl"]).status.success());
    let n_pred = lines(&s.path("p.jsonl")).len();
    let n_gold = lines(&s.path("d/sft.train.jsonl")).len();
    let out = s.run(&["eval", "--in", "p.jsonl", "--gold", "d/sft.train.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains(&format!("{n_pred} predictions")) && msg.contains(&format!("{n_gold} gold")), "{msg}");
}

#[test]
fn repl_prints_memorized_gold_and_quits_cleanly() {
    let s = Scratch::new("repl");
    s.corpus(20);
    let out = s.run(&["train", "--stage", "sft", "--in", "d", "--epochs", "200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let train = lines(&s.path("d/sft.train.jsonl"));
    let rec = &train[0];
    let session = format!("{}\n{}\n:quit\nnever read\n", rec["instruction"].as_str().unwrap(), rec["context"].as_str().unwrap());
    let out = s.run_with_stdin(&["repl", "--in", "d", "--model", "d/sft.json"], Some(&session));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().next(), rec["output"].as_str());
}

#[test]
fn repl_flags_invalid_unconstrained_output() {
    let s = Scratch::new("replneg");
    s.corpus(20);
    let rec = &lines(&s.path("d/sft.train.jsonl"))[0];
    let query = format!("{}\n{}\n", rec["instruction"].as_str().unwrap(), rec["context"].as_str().unwrap());
    let session = format!("{query}:constraints off\n{query}{query}{query}");
    let out = s.run_with_stdin(&["repl", "--in", "d"], Some(&session));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let (on, off) = text.split_once("constraints off").unwrap();
    assert!(!on.contains("! invalid"), "{on}");
    assert!(off.contains("! invalid"), "{off}");
}
