use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::process::ExitCode;

use mmk_core::checkpoint::{self, vocab_hash, CheckpointHeader};
use mmk_core::config::RunConfig;
use mmk_core::corpus::{
    generate_synthetic, load_dataset_with, parse_dataset, save_dataset, select_split, Dialogue,
    LoadOptions, Split,
};
use mmk_core::eval::{evaluate_examples, score_pairs};
use mmk_core::generation::{generate_for_dialogue, DecodeConfig, Strategy};
use mmk_core::knowledge::{load_kb, save_kb, KnowledgeIndex, KnowledgeSnippet};
use mmk_core::metrics::{
    csv_header, csv_row, markdown_table, Embeddings, MetricOptions, MetricReport, CSV_COLUMNS,
};
use mmk_core::model::{prepare_examples, Model};
use mmk_core::numerics::CheckOptions;
use mmk_core::textproc::Vocabulary;
use mmk_core::training::{
    gradcheck_model, log_csv, paper_reference_rows, prepare_corpus, run_ablation, train_loop,
    AblationData, AblationRow, AblationSpec,
};
use mmk_core::{io::write_atomic, parse_tasks, Error, Result, Task};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{
    AblateArgs, DecodeArgs, EvalArgs, GenDataArgs, GenerateArgs, GradcheckArgs, RetrieveArgs,
    TrainArgs,
};

pub const VOCAB_FILE: &str = "vocab.json";
pub const KB_FILE: &str = "knowledge.jsonl";

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::config(format!(
                "--out {}: exists and is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::config(format!(
                "--out {}: directory already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn flag_err(flag: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::config(format!("{flag}: {m}")),
        other => other,
    }
}

fn load_run(spec: &str, seed: Option<u64>, steps: Option<usize>) -> Result<RunConfig> {
    let mut run = RunConfig::resolve(spec).map_err(|e| flag_err("--config", e))?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(s) = steps {
        run.train.max_steps = s;
    }
    run.validate().map_err(|e| flag_err("--config", e))?;
    Ok(run)
}

fn training_data(path: &Path, d_vis: usize) -> Result<Vec<Dialogue>> {
    let opts = LoadOptions {
        d_vis: Some(d_vis),
        require_targets: true,
    };
    load_dataset_with(path, opts)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e| flag_err("--split", e))
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    if a.n == 0 {
        return Err(Error::config("--n: at least one dialogue is required"));
    }
    prepare_out(&a.out, a.force)?;
    let c = generate_synthetic(a.n, a.seed, a.dvis);
    save_dataset(&a.out.join("dialogues.jsonl"), &c.dialogues)?;
    save_kb(&a.out.join(KB_FILE), &c.knowledge)?;
    eprintln!(
        "wrote {} dialogues and {} knowledge entries to {}",
        c.dialogues.len(),
        c.knowledge.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let run = load_run(&a.config, a.seed, a.steps)?;
    let tasks = parse_tasks(&a.tasks).map_err(|e| flag_err("--tasks", e))?;
    let split = parse_split(&a.split)?;
    if !matches!(split, Split::Train | Split::All) {
        return Err(Error::config("--split: training uses `train` or `all`"));
    }
    let records = training_data(&a.data, run.model.d_vis)?;
    let kb = load_kb(&a.kb)?;
    prepare_out(&a.out, a.force)?;

    let train_records = select_split(&records, split);
    let dev_records = if split == Split::Train {
        select_split(&records, Split::Dev)
    } else {
        Vec::new()
    };
    if train_records.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no records in the {} split",
            a.data.display(),
            a.split
        )));
    }
    let prep = prepare_corpus(&train_records, &kb, &run)?;
    let k = run.data.retrieval_k;
    let train = prep.examples(&train_records, k)?;
    let dev = prep.examples(&dev_records, k)?;
    eprintln!(
        "training on {} records ({} dev), vocab {}, tasks {}",
        train.len(),
        dev.len(),
        prep.vocab.len(),
        a.tasks
    );

    let every = run.train.eval_every.max(1);
    let out = train_loop(&train, &dev, &prep.model, &run.train, &tasks, |row| {
        if row.step % every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  lr {:.2e}",
                row.step, row.loss_total, row.lr
            );
        }
    })?;

    let saved = RunConfig {
        model: prep.model.clone(),
        ..run.clone()
    };
    write_text(&a.out.join("config.toml"), &saved.to_toml()?)?;
    prep.vocab.save(&a.out.join(VOCAB_FILE))?;
    save_kb(&a.out.join(KB_FILE), &kb)?;
    write_text(&a.out.join("train_log.csv"), &log_csv(&out.log))?;

    let header = |step: usize, metrics: BTreeMap<String, f64>| CheckpointHeader {
        config: prep.model.clone(),
        vocab_sha256: vocab_hash(&prep.vocab),
        step: step as u64,
        tasks: tasks.clone(),
        retrieval_k: k,
        metrics,
    };
    let last_loss = out.log.last().map_or(f64::NAN, |r| r.loss_total);
    let mut best_metrics = BTreeMap::new();
    if out.best_loss.is_finite() {
        best_metrics.insert(
            if dev.is_empty() {
                "train_loss"
            } else {
                "dev_loss"
            }
            .to_string(),
            out.best_loss,
        );
    }
    checkpoint::save(
        &a.out.join("best.ckpt"),
        &header(out.best_step, best_metrics),
        &out.best,
    )?;
    let mut final_metrics = BTreeMap::new();
    if last_loss.is_finite() {
        final_metrics.insert("train_loss".to_string(), last_loss);
    }
    checkpoint::save(
        &a.out.join("final.ckpt"),
        &header(run.train.max_steps, final_metrics),
        &out.last,
    )?;
    eprintln!(
        "best step {} (loss {:.5}); checkpoints in {}",
        out.best_step,
        out.best_loss,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// A checkpoint with the vocabulary and knowledge base saved next to it.
struct Loaded {
    header: CheckpointHeader,
    model: Model,
    vocab: Vocabulary,
    index: KnowledgeIndex,
}

fn load_checkpoint(ckpt: &Path, kb: Option<&Path>) -> Result<Loaded> {
    let (header, model) = checkpoint::load(ckpt)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab_hash(&vocab) != header.vocab_sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: {} does not match the vocabulary the checkpoint was trained with",
            ckpt.display(),
            dir.join(VOCAB_FILE).display()
        )));
    }
    let kb_path = kb
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(KB_FILE));
    let index = KnowledgeIndex::build(load_kb(&kb_path)?)?;
    Ok(Loaded {
        header,
        model,
        vocab,
        index,
    })
}

fn decode_config(d: &DecodeArgs) -> Result<DecodeConfig> {
    let cfg = if d.beam == 1 {
        DecodeConfig::greedy(d.max_new)
    } else {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: d.beam,
            max_new_tokens: d.max_new,
            length_penalty: d.length_penalty,
        }
    };
    cfg.validate()
        .map_err(|e| flag_err("--beam/--length-penalty", e))?;
    Ok(cfg)
}

/// `{"id", "task", "output"}` lines keyed by (id, task).
fn load_predictions(path: &Path) -> Result<HashMap<(String, Task), String>> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        task: String,
        output: String,
    }
    let text = mmk_core::io::read_to_string(path)?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Line = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let task: Task = p.task.parse()?;
        out.insert((p.id, task), p.output);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let tasks = parse_tasks(&a.tasks).map_err(|e| flag_err("--tasks", e))?;
    let split = parse_split(&a.split)?;
    let dcfg = decode_config(&a.decode)?;
    let loaded = match &a.ckpt {
        Some(c) => Some(load_checkpoint(c, a.kb.as_deref())?),
        None if a.predictions.is_some() => None,
        None => {
            return Err(Error::config(
                "--ckpt is required unless --predictions is given",
            ))
        }
    };
    let opts = LoadOptions {
        d_vis: loaded.as_ref().map(|l| l.model.cfg.d_vis),
        require_targets: true,
    };
    let records = select_split(&load_dataset_with(&a.data, opts)?, split);
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no records in the {} split",
            a.data.display(),
            a.split
        )));
    }
    let predictions = a.predictions.as_deref().map(load_predictions).transpose()?;
    let mopts = MetricOptions::default();

    let mut rows = Vec::new();
    for &task in &tasks {
        let refs: Vec<String> = records
            .iter()
            .map(|d| d.targets.get(task).to_string())
            .collect();
        let mean = match (&predictions, &loaded) {
            (Some(preds), _) => {
                let pairs = records
                    .iter()
                    .zip(&refs)
                    .map(|(d, r)| {
                        preds
                            .get(&(d.id.clone(), task))
                            .map(|h| (h.clone(), r.clone()))
                            .ok_or_else(|| {
                                Error::Dataset(format!(
                                    "--predictions: no {task} output for `{}`",
                                    d.id
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let emb = loaded.as_ref().map(|l| Embeddings {
                    vocab: &l.vocab,
                    table: l.model.embeddings(),
                });
                score_pairs(&pairs, emb.as_ref(), mopts)?.1
            }
            (None, Some(l)) => {
                let ex = prepare_examples(
                    &records,
                    &l.vocab,
                    Some(&l.index),
                    l.header.retrieval_k,
                    &l.model.cfg,
                )?;
                evaluate_examples(&l.model, &l.vocab, &ex, &refs, task, &dcfg, mopts)?.mean
            }
            (None, None) => unreachable!("checked above"),
        };
        eprintln!("{task}: ROUGE-L {:.2}  BLEU {:.2}", mean.rl, mean.bleu);
        rows.push((task.name().to_string(), mean, None));
    }

    let mut csv = csv_header();
    csv.push('\n');
    for (name, r, _) in &rows {
        csv.push_str(&csv_row(name, r));
        csv.push('\n');
    }
    if let Some(dir) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_text(&a.report, &csv)?;
    let md = format!(
        "# Evaluation: {} split of {} ({} records)\n\n{}",
        a.split,
        a.data.display(),
        records.len(),
        markdown_table(&rows)
    );
    write_text(&a.report.with_extension("md"), &md)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    id: &'a str,
    task: Task,
    output: &'a str,
    score: f64,
}

pub fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let task: Task = a.task.parse().map_err(|e| flag_err("--task", e))?;
    let dcfg = decode_config(&a.decode)?;
    let l = load_checkpoint(&a.ckpt, a.kb.as_deref())?;
    let opts = LoadOptions {
        d_vis: Some(l.model.cfg.d_vis),
        require_targets: false,
    };
    let records = if a.input == "-" {
        let mut text = String::new();
        io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Error::io("<stdin>", e))?;
        parse_dataset(&text, opts)?
    } else {
        load_dataset_with(Path::new(&a.input), opts)?
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for d in &records {
        let g = generate_for_dialogue(
            &l.model,
            &l.vocab,
            Some(&l.index),
            l.header.retrieval_k,
            d,
            task,
            &dcfg,
        )?;
        let line = GeneratedLine {
            id: &d.id,
            task,
            output: &g.text,
            score: g.score,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let run = load_run(&a.config, None, None)?;
    if run.model.vocab_size == 0 {
        return Err(Error::config(
            "--config: gradcheck needs an explicit vocab_size",
        ));
    }
    let opts = CheckOptions {
        eps: a.eps,
        tol: a.tol,
        seed: a.seed,
        ..CheckOptions::default()
    };
    let report = gradcheck_model(&run.model, opts)?;
    if let Some(path) = &a.report {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    let blocks: Vec<_> = report
        .blocks
        .iter()
        .map(|b| json!({"name": b.name, "checked": b.coords.len(), "max_rel_err": b.max_rel_err}))
        .collect();
    let summary = json!({
        "eps": report.eps,
        "tol": report.tol,
        "max_rel_err": report.max_rel_err,
        "passed": report.passed,
        "blocks": blocks,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

#[derive(Serialize)]
struct RankedSnippet<'a> {
    rank: usize,
    entry: usize,
    term: &'a str,
    description: &'a str,
    score: f64,
}

pub fn retrieve(a: RetrieveArgs) -> Result<ExitCode> {
    let index = KnowledgeIndex::build(load_kb(&a.kb)?)?;
    let hits = index
        .retrieve_text(&a.query, a.k)
        .map_err(|e| flag_err("--k", e))?;
    let ranked: Vec<RankedSnippet> = hits
        .iter()
        .enumerate()
        .map(|(i, h)| RankedSnippet {
            rank: i + 1,
            entry: h.entry,
            term: &h.snippet.term,
            description: &h.snippet.description,
            score: h.score,
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&ranked)?);
    Ok(ExitCode::SUCCESS)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("--seeds: `{p}` is not a non-negative integer")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::config("--seeds: at least one seed is required"));
    }
    Ok(seeds)
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";
pub const ABLATION_MD: &str = "ablation.md";
pub const FULL_MODEL: &str = "MMK-Summation";
pub const SUMMARY_ONLY: &str = "MM-MDS";

/// Per-seed rows plus, optionally, the published reference rows with only
/// their reported columns filled.
fn ablation_csv(rows: &[AblationRow], paper: bool) -> String {
    let mut s = format!("{},seed,paper_scale\n", csv_header());
    for r in rows {
        if let Ok(m) = &r.result {
            s.push_str(&format!("{},{},false\n", csv_row(&r.model, m), r.seed));
        }
    }
    if paper {
        for (name, cols) in paper_reference_rows() {
            let cells: Vec<String> = CSV_COLUMNS
                .iter()
                .map(|c| cols.get(c).map(|v| format!("{v:.2}")).unwrap_or_default())
                .collect();
            s.push_str(&format!("{name},{},,true\n", cells.join(",")));
        }
    }
    s
}

struct Summary {
    model: String,
    n: usize,
    mean: MetricReport,
    std: MetricReport,
}

fn summarize(rows: &[AblationRow], spec: &AblationSpec) -> Vec<Summary> {
    spec.runs
        .iter()
        .map(|run| {
            let ok: Vec<MetricReport> = rows
                .iter()
                .filter(|r| r.model == run.name)
                .filter_map(|r| r.result.as_ref().ok().copied())
                .collect();
            let (mean, std) = MetricReport::mean_std(&ok);
            Summary {
                model: run.name.clone(),
                n: ok.len(),
                mean,
                std,
            }
        })
        .collect()
}

fn ordering_line(summary: &[Summary]) -> Option<String> {
    let get = |name: &str| summary.iter().find(|s| s.model == name && s.n > 0);
    let (full, base) = (get(FULL_MODEL)?, get(SUMMARY_ONLY)?);
    let diff = full.mean.rl - base.mean.rl;
    let verdict = if diff >= 0.0 {
        format!("{FULL_MODEL} ≥ {SUMMARY_ONLY}")
    } else {
        format!("{FULL_MODEL} < {SUMMARY_ONLY}")
    };
    Some(format!(
        "ROUGE-L(summary): {FULL_MODEL} {:.2} ± {:.2}, {SUMMARY_ONLY} {:.2} ± {:.2}, difference {diff:+.2}; ordering {verdict}; within 1.0 point tolerance: {}",
        full.mean.rl,
        full.std.rl,
        base.mean.rl,
        base.std.rl,
        if diff >= -1.0 { "yes" } else { "no" }
    ))
}

pub fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let run = load_run(&a.config, None, a.steps)?;
    let seeds = parse_seeds(&a.seeds)?;
    let records = training_data(&a.data, run.model.d_vis)?;
    let kb: Vec<KnowledgeSnippet> = load_kb(&a.kb)?;
    prepare_out(&a.out, a.force)?;

    let train_records = select_split(&records, Split::Train);
    let dev_records = select_split(&records, Split::Dev);
    let test_records = select_split(&records, Split::Test);
    if train_records.is_empty() || test_records.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} train and {} test records; both splits must be non-empty",
            a.data.display(),
            train_records.len(),
            test_records.len()
        )));
    }
    let prep = prepare_corpus(&train_records, &kb, &run)?;
    let k = run.data.retrieval_k;
    let train = prep.examples(&train_records, k)?;
    let dev = prep.examples(&dev_records, k)?;
    let test = prep.examples(&test_records, k)?;
    let test_refs: Vec<String> = test_records
        .iter()
        .map(|d| d.targets.summary.clone())
        .collect();
    eprintln!(
        "ablation: {} train / {} dev / {} test records, seeds {:?}",
        train.len(),
        dev.len(),
        test.len(),
        seeds
    );

    let spec = AblationSpec::standard(seeds);
    let data = AblationData {
        train: &train,
        dev: &dev,
        test: &test,
        test_refs: &test_refs,
        vocab: &prep.vocab,
    };
    let rows = run_ablation(
        &data,
        &prep.model,
        &run.train,
        &run.decode,
        MetricOptions::default(),
        &spec,
        |name, seed, r| match r {
            Ok(m) => eprintln!(
                "{name:<14} seed {seed}: ROUGE-L {:.2}  BLEU {:.2}",
                m.rl, m.bleu
            ),
            Err(e) => eprintln!("{name:<14} seed {seed}: FAILED: {e}"),
        },
    );

    let summary = summarize(&rows, &spec);
    write_text(
        &a.out.join(ABLATION_CSV),
        &ablation_csv(&rows, a.paper_reference),
    )?;

    let mut s = format!("{},stat,n_seeds\n", csv_header());
    for sm in &summary {
        s.push_str(&format!("{},mean,{}\n", csv_row(&sm.model, &sm.mean), sm.n));
        s.push_str(&format!("{},std,{}\n", csv_row(&sm.model, &sm.std), sm.n));
    }
    write_text(&a.out.join(ABLATION_SUMMARY_CSV), &s)?;

    let table: Vec<(String, MetricReport, Option<MetricReport>)> = summary
        .iter()
        .map(|s| (s.model.clone(), s.mean, Some(s.std)))
        .collect();
    let mut md = format!(
        "# Task ablation\n\nSummary-task scores on {} test dialogues, mean ± sample std over {} seed(s).\n\n{}",
        test.len(),
        spec.seeds.len(),
        markdown_table(&table)
    );
    let ordering = ordering_line(&summary);
    if let Some(line) = &ordering {
        md.push_str(&format!("\n{line}\n"));
        println!("{line}");
    }
    let failures: Vec<&AblationRow> = rows.iter().filter(|r| r.result.is_err()).collect();
    if !failures.is_empty() {
        md.push_str("\n## Failed runs\n\n");
        for r in &failures {
            md.push_str(&format!(
                "- {} seed {}: {}\n",
                r.model,
                r.seed,
                r.result.as_ref().unwrap_err()
            ));
        }
    }
    if a.paper_reference {
        md.push_str("\n## Published reference (different data and scale, not comparable)\n\n");
        for (name, cols) in paper_reference_rows() {
            let cells: Vec<String> = cols.iter().map(|(c, v)| format!("{c} {v:.2}")).collect();
            md.push_str(&format!("- {name}: {}\n", cells.join(", ")));
        }
    }
    write_text(&a.out.join(ABLATION_MD), &md)?;
    eprintln!("reports in {}", a.out.display());
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: {} of {} runs failed", failures.len(), rows.len());
        Ok(ExitCode::from(2))
    }
}
