//! Corpus-level evaluation: decode every record, score against gold, average.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generation::{generate, DecodeConfig, Generated};
use crate::metrics::{Embeddings, MetricOptions, MetricReport};
use crate::model::{Example, Model};
use crate::textproc::Vocabulary;
use crate::Task;

pub const THREADS_ENV: &str = "MMK_THREADS";

/// Worker count from `MMK_THREADS`, or the machine's cores when unset.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!(
                "{THREADS_ENV}={v:?} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a pool sized by [`thread_count`].
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::config(format!("cannot start evaluation threads: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordResult {
    pub id: String,
    pub task: Task,
    pub output: String,
    pub reference: String,
    pub score: f64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub records: Vec<RecordResult>,
    /// Mean of the per-record reports.
    pub mean: MetricReport,
}

/// Scores hypothesis/reference pairs; the corpus score is the mean of the
/// per-record scores.
pub fn score_pairs(
    pairs: &[(String, String)],
    emb: Option<&Embeddings>,
    opts: MetricOptions,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    if pairs.is_empty() {
        return Err(Error::Dataset("nothing to score".into()));
    }
    let per: Vec<MetricReport> = pairs
        .iter()
        .map(|(h, r)| MetricReport::score(h, r, emb, opts))
        .collect();
    let mean = MetricReport::mean(&per);
    Ok((per, mean))
}

/// Decodes `task` for every example in parallel and scores each output
/// against `references[i]`. Results keep input order, so the mean does not
/// depend on the thread count.
pub fn evaluate_examples(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[Example],
    references: &[String],
    task: Task,
    dcfg: &DecodeConfig,
    opts: MetricOptions,
) -> Result<EvalOutcome> {
    if examples.len() != references.len() {
        return Err(Error::contract(format!(
            "{} examples but {} references",
            examples.len(),
            references.len()
        )));
    }
    if examples.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let emb = Embeddings {
        vocab,
        table: model.embeddings(),
    };
    let outputs: Vec<Result<Generated>> = with_pool(|| {
        examples
            .par_iter()
            .map(|ex| generate(model, vocab, ex, task, dcfg))
            .collect()
    })?;
    let mut records = Vec::with_capacity(examples.len());
    for ((ex, reference), out) in examples.iter().zip(references).zip(outputs) {
        let out = out?;
        let metrics = MetricReport::score(&out.text, reference, Some(&emb), opts);
        records.push(RecordResult {
            id: ex.id.clone(),
            task,
            output: out.text,
            reference: reference.clone(),
            score: out.score,
            metrics,
        });
    }
    let per: Vec<MetricReport> = records.iter().map(|r| r.metrics).collect();
    Ok(EvalOutcome {
        mean: MetricReport::mean(&per),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pairs_score_maximum() {
        let pairs = vec![
            (
                "patient reports fever .".to_string(),
                "patient reports fever .".to_string(),
            ),
            ("likely asthma".to_string(), "likely asthma".to_string()),
        ];
        let (_, mean) = score_pairs(&pairs, None, MetricOptions::default()).unwrap();
        assert_eq!(mean.bleu, 100.0);
        assert_eq!(mean.rl, 100.0);
        assert_eq!(mean.jaccard, 1.0);
    }
}
