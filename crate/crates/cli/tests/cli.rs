use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SUBCOMMANDS: [&str; 7] = [
    "gen-data",
    "train",
    "eval",
    "generate",
    "gradcheck",
    "retrieve",
    "ablate",
];

fn mmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmk"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Flag entries of a help page: (flag name, full entry text).
fn flag_entries(help: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in help.lines() {
        let t = line.trim_start();
        let flag = t.strip_prefix("-h, ").unwrap_or(t);
        if let Some(rest) = flag.strip_prefix("--") {
            let name = rest.split([' ', '<']).next().unwrap().to_string();
            out.push((name, t.to_string()));
        } else if let Some(last) = out.last_mut() {
            if !t.is_empty() && line.starts_with("   ") {
                last.1.push(' ');
                last.1.push_str(t);
            }
        }
    }
    out
}

#[test]
fn help_lists_every_flag_with_its_default() {
    for sub in SUBCOMMANDS {
        let o = mmk(&[sub, "--help"]);
        assert!(o.status.success(), "{sub} --help");
        let help = String::from_utf8(o.stdout).unwrap();
        let usage = help
            .lines()
            .find(|l| l.starts_with("Usage:"))
            .unwrap()
            .to_string();
        let entries = flag_entries(&help);
        assert!(entries.len() > 1, "{sub}: no flags parsed");
        for (name, text) in entries {
            if name == "help" {
                continue;
            }
            let required = usage.contains(&format!("--{name} <"));
            assert!(
                required || text.contains("default"),
                "{sub} --{name} has neither a default nor is required: {text}"
            );
        }
    }
}

#[test]
fn documented_defaults_are_shown() {
    let help = |sub: &str| String::from_utf8(mmk(&[sub, "--help"]).stdout).unwrap();
    assert!(help("gen-data").contains("[default: 500]"));
    assert!(help("train").contains("[default: sum,mcs,di]"));
    assert!(help("eval").contains("[default: test]"));
    assert!(help("generate").contains("[default: 4]"));
    assert!(
        help("gradcheck").contains("[default: 1e-4]")
            || help("gradcheck").contains("[default: 0.0001]")
    );
    assert!(help("retrieve").contains("[default: 3]"));
    assert!(help("ablate").contains("[default: 1,2,3]"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mmk(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(mmk(&["train", "--data"]).status.code(), Some(1));
    assert_eq!(
        mmk(&["gen-data", "--n", "ten", "--out", "x"]).status.code(),
        Some(1)
    );
    assert_eq!(mmk(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_are_named() {
    let o = mmk(&[
        "retrieve",
        "--kb",
        "/nonexistent/kb.jsonl",
        "--query",
        "fever",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("/nonexistent/kb.jsonl"),
        "{}",
        stderr(&o)
    );
    let o = mmk(&["gradcheck", "--config", "no-such-preset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));
}

#[test]
fn out_dir_is_not_reused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert!(mmk(&["gen-data", "--n", "5", "--out", p(&out)])
        .status
        .success());
    let before = fs::read(out.join("dialogues.jsonl")).unwrap();
    let o = mmk(&["gen-data", "--n", "5", "--seed", "3", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    assert_eq!(fs::read(out.join("dialogues.jsonl")).unwrap(), before);
    assert!(mmk(&["gen-data", "--n", "5", "--out", p(&out), "--force"])
        .status
        .success());
    assert_eq!(fs::read(out.join("dialogues.jsonl")).unwrap(), before);
}

#[test]
fn gradcheck_exit_code_follows_result() {
    let o = mmk(&["gradcheck", "--config", "test-nano"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    // an impossible tolerance fails the check, not the invocation
    let o = mmk(&["gradcheck", "--config", "test-nano", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mmk(&["gradcheck", "--config", "test-nano", "--eps", "1e-9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn retrieve_prints_ranked_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(mmk(&["gen-data", "--n", "2", "--out", p(&data)])
        .status
        .success());
    let o = mmk(&[
        "retrieve",
        "--kb",
        p(&data.join("knowledge.jsonl")),
        "--query",
        "fever and rash",
        "--k",
        "2",
    ]);
    assert!(o.status.success());
    let hits: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(hits.len(), 2);
    let terms: Vec<&str> = hits.iter().map(|h| h["term"].as_str().unwrap()).collect();
    assert!(
        terms.contains(&"fever") && terms.contains(&"rash"),
        "{terms:?}"
    );
    assert_eq!(hits[0]["rank"], 1);
    assert!(hits[0]["score"].as_f64().unwrap() >= hits[1]["score"].as_f64().unwrap());
}

#[test]
fn eval_of_gold_predictions_scores_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(mmk(&["gen-data", "--n", "12", "--out", p(&data)])
        .status
        .success());
    let records = fs::read_to_string(data.join("dialogues.jsonl")).unwrap();
    let mut preds = String::new();
    for line in records.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for (task, field) in [("sum", "summary"), ("mcs", "mcs"), ("di", "di")] {
            let row = serde_json::json!({"id": r["id"], "task": task, "output": r[field]});
            preds.push_str(&format!("{row}\n"));
        }
    }
    let pred_path = dir.path().join("gold.jsonl");
    fs::write(&pred_path, preds).unwrap();
    let report = dir.path().join("r/report.csv");
    let o = mmk(&[
        "eval",
        "--data",
        p(&data.join("dialogues.jsonl")),
        "--split",
        "all",
        "--predictions",
        p(&pred_path),
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let bleu = header.iter().position(|h| *h == "BLEU").unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r[bleu], "100.00", "{r:?}");
    }
    assert!(fs::read_to_string(report.with_extension("md"))
        .unwrap()
        .contains("| sum |"));
}

#[test]
fn train_generate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(
        mmk(&["gen-data", "--n", "30", "--dvis", "8", "--out", p(&data)])
            .status
            .success()
    );
    let run = dir.path().join("run");
    let o = mmk(&[
        "train",
        "--data",
        p(&data.join("dialogues.jsonl")),
        "--kb",
        p(&data.join("knowledge.jsonl")),
        "--config",
        "test-nano",
        "--tasks",
        "sum,di",
        "--steps",
        "5",
        "--split",
        "all",
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "best.ckpt",
        "final.ckpt",
        "vocab.json",
        "knowledge.jsonl",
        "config.toml",
        "train_log.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("train_log.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let input = fs::read_to_string(data.join("dialogues.jsonl")).unwrap();
    let first_two: String = input.lines().take(2).map(|l| format!("{l}\n")).collect();
    let mut child = Command::new(env!("CARGO_BIN_EXE_mmk"))
        .args([
            "generate",
            "--ckpt",
            p(&run.join("best.ckpt")),
            "--input",
            "-",
            "--task",
            "di",
            "--max-new",
            "4",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(first_two.as_bytes())
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert_eq!(l["task"], "di");
        assert!(l["output"].is_string() && l["score"].is_number() && l["id"].is_string());
    }

    let report = dir.path().join("eval.csv");
    let o = mmk(&[
        "eval",
        "--ckpt",
        p(&run.join("final.ckpt")),
        "--data",
        p(&data.join("dialogues.jsonl")),
        "--split",
        "all",
        "--tasks",
        "sum",
        "--beam",
        "1",
        "--max-new",
        "4",
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);

    // a checkpoint whose vocabulary file was swapped is refused
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("vocab.json")).unwrap()).unwrap();
    v["min_freq"] = serde_json::json!(7);
    fs::write(run.join("vocab.json"), v.to_string()).unwrap();
    let o = mmk(&[
        "generate",
        "--ckpt",
        p(&run.join("best.ckpt")),
        "--input",
        p(&data.join("dialogues.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_reports_the_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(
        mmk(&["gen-data", "--n", "40", "--dvis", "8", "--out", p(&data)])
            .status
            .success()
    );
    let out = dir.path().join("abl");
    let o = mmk(&[
        "ablate",
        "--data",
        p(&data.join("dialogues.jsonl")),
        "--kb",
        p(&data.join("knowledge.jsonl")),
        "--config",
        "test-nano",
        "--seeds",
        "1",
        "--steps",
        "3",
        "--paper-reference",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().ends_with(",seed,paper_scale"));
    let names: Vec<&str> = lines
        .clone()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "MM-MDS",
            "with-MCS",
            "with-DI",
            "MMK-Summation",
            "MMK-Summation",
            "MM-MDS"
        ]
    );
    let paper: Vec<&str> = lines.filter(|l| l.ends_with(",true")).collect();
    assert_eq!(paper.len(), 2);
    assert!(paper[0].contains("51.05"));
    let md = fs::read_to_string(out.join("ablation.md")).unwrap();
    for name in ["MM-MDS", "with-MCS", "with-DI", "MMK-Summation"] {
        assert!(md.contains(&format!("| {name} |")), "{name}");
    }
    assert!(md.contains("ordering"));
}
