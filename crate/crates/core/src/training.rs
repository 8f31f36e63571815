//! Joint multi-task optimisation and the ablation grid.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{vocab_texts, Dialogue};
use crate::error::{Error, Result};
use crate::eval::{evaluate_examples, EvalOutcome};
use crate::generation::DecodeConfig;
use crate::knowledge::{KnowledgeIndex, KnowledgeSnippet};
use crate::metrics::{MetricOptions, MetricReport};
use crate::model::{
    init_params, multitask_forward, prepare_examples, DropoutStreams, Example, Model, ModelConfig,
    ModelParams, TaskLosses,
};
use crate::numerics::{
    finite_diff_check, Bindings, CheckOptions, CheckReport, Graph, NamedTensors, Tensor, Var,
};
use crate::textproc::{special, TokenId, TokenSequence, Vocabulary};
use crate::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    /// λ for (sum, mcs, di).
    pub task_weights: [f64; 3],
    pub seed: u64,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Dev-loss evaluation period for best-checkpoint selection.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            betas: [0.9, 0.98],
            eps: 1e-9,
            batch_size: 1,
            max_steps: 1000,
            warmup_steps: 100,
            task_weights: [1.0, 1.0, 1.0],
            seed: 0,
            grad_clip_norm: 1.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr {} must be finite and ≥ 0",
                self.lr
            )));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config(format!(
                "betas {:?} must lie in [0, 1)",
                self.betas
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self
            .task_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::config(format!(
                "task weights {:?} must be finite and ≥ 0",
                self.task_weights
            )));
        }
        if self.task_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::config("at least one task weight must be positive"));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::config("grad_clip_norm must be ≥ 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then constant. `step` is 0-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// RNG stream ids mixed into the master seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const ORDER: u64 = 1;
    pub const ENCODER: u64 = 2;
    /// Task `t` uses `TASK_BASE + t.index()`.
    pub const TASK_BASE: u64 = 3;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

pub fn dropout_streams(master: u64) -> DropoutStreams {
    DropoutStreams::from_seeds(
        stream_seed(master, streams::ENCODER),
        Task::ALL.map(|t| stream_seed(master, streams::TASK_BASE + t.index() as u64)),
    )
}

fn active_weights(weights: [f64; 3], tasks: &[Task]) -> Result<(f64, Vec<(Task, f64)>)> {
    let pairs: Vec<(Task, f64)> = tasks.iter().map(|&t| (t, weights[t.index()])).collect();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::config(format!(
            "task weights {weights:?} are all zero over the active tasks {tasks:?}"
        )));
    }
    Ok((total, pairs))
}

/// `Σ λ_t·L_t / Σ λ_t` over the tasks present in `losses`. Zero-weight
/// tasks do not enter the graph of the result.
pub fn joint_loss(g: &mut Graph, losses: &TaskLosses, weights: [f64; 3]) -> Result<Var> {
    let tasks: Vec<Task> = losses.losses.iter().map(|l| l.0).collect();
    let (total, pairs) = active_weights(weights, &tasks)?;
    let mut acc: Option<Var> = None;
    for ((_, w), &(_, l)) in pairs.iter().zip(&losses.losses) {
        if *w == 0.0 {
            continue;
        }
        let term = g.scale(l, w / total)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::config("no positively weighted task"))
}

/// Scalar counterpart of [`joint_loss`], same arithmetic.
pub fn joint_value(losses: &[(Task, f64)], weights: [f64; 3]) -> Result<f64> {
    let tasks: Vec<Task> = losses.iter().map(|l| l.0).collect();
    let (total, pairs) = active_weights(weights, &tasks)?;
    let mut acc: Option<f64> = None;
    for ((_, w), &(_, l)) in pairs.iter().zip(losses) {
        if *w == 0.0 {
            continue;
        }
        let term = l * (w / total);
        acc = Some(acc.map_or(term, |a| a + term));
    }
    acc.ok_or_else(|| Error::config("no positively weighted task"))
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: NamedTensors,
    v: NamedTensors,
}

impl AdamState {
    pub fn new(params: &NamedTensors) -> Result<Self> {
        let zeros = |p: &NamedTensors| -> Result<NamedTensors> {
            p.iter()
                .map(|(k, t)| Ok((k.clone(), Tensor::zeros(t.shape().to_vec())?)))
                .collect()
        };
        Ok(AdamState {
            step: 0,
            m: zeros(params)?,
            v: zeros(params)?,
        })
    }

    /// One update in place. Returns the pre-clipping global gradient norm.
    pub fn update(
        &mut self,
        params: &mut NamedTensors,
        grads: &NamedTensors,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
            cfg.grad_clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no Adam state for `{name}`")))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no Adam state for `{name}`")))?;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub per_task: [Option<f64>; 3],
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, backward and one Adam update on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    batch: &[&Example],
    tasks: &[Task],
    streams: Option<&mut DropoutStreams>,
    step: usize,
) -> Result<StepOutcome> {
    let mut g = Graph::new().with_finite_checks(false);
    let bind = Bindings::params(&mut g, &params.tensors);
    let losses = multitask_forward(&mut g, &bind, mcfg, batch, tasks, streams)?;
    let total = joint_loss(&mut g, &losses, cfg.task_weights)?;
    let loss = g.value(total).data()[0];
    let mut per_task = [None; 3];
    for &(t, v) in &losses.losses {
        per_task[t.index()] = Some(g.value(v).data()[0]);
    }
    let non_finite = || Error::NonFiniteLoss {
        step,
        records: batch
            .iter()
            .map(|e| e.id.as_str())
            .collect::<Vec<_>>()
            .join(", "),
    };
    if !loss.is_finite() || per_task.iter().flatten().any(|l| !l.is_finite()) {
        return Err(non_finite());
    }
    let mut grads = g.backward(total)?;
    let grads = bind.collect_grads(&mut grads)?;
    if grads.values().any(|t| !t.all_finite()) {
        return Err(non_finite());
    }
    let lr = cfg.lr_at(step);
    let grad_norm = opt.update(&mut params.tensors, &grads, lr, cfg)?;
    Ok(StepOutcome {
        loss,
        per_task,
        lr,
        grad_norm,
    })
}

/// Mean joint loss over `examples` without dropout.
pub fn eval_loss(
    params: &ModelParams,
    mcfg: &ModelConfig,
    weights: [f64; 3],
    examples: &[Example],
    tasks: &[Task],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Dataset("no records to evaluate".into()));
    }
    let mut sum = 0.0;
    for ex in examples {
        let mut g = Graph::new().with_finite_checks(false);
        let bind = Bindings::constants(&mut g, &params.tensors);
        let losses = multitask_forward(&mut g, &bind, mcfg, &[ex], tasks, None)?;
        let total = joint_loss(&mut g, &losses, weights)?;
        sum += g.value(total).data()[0];
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub per_task: [Option<f64>; 3],
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,loss_total,loss_sum,loss_mcs,loss_di,lr";

/// Training log CSV; losses of inactive tasks are left empty.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.loss_total,
            cell(r.per_task[0]),
            cell(r.per_task[1]),
            cell(r.per_task[2]),
            r.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: ModelParams,
    pub last: ModelParams,
    pub best: ModelParams,
    pub best_step: usize,
    /// Dev joint loss of `best` (training loss when there is no dev set).
    pub best_loss: f64,
    pub log: Vec<LogRow>,
}

/// Trains from the seed-derived initialisation for `cfg.max_steps` steps.
/// Batches walk a per-epoch shuffle of `train`. The best checkpoint is
/// chosen by dev loss every `eval_every` steps and after the last step.
pub fn train_loop(
    train: &[Example],
    dev: &[Example],
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    tasks: &[Task],
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mcfg.validate()?;
    active_weights(cfg.task_weights, tasks)?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for ex in train.iter().chain(dev) {
        for &t in tasks {
            ex.target(t)?;
        }
    }
    let initial = init_params(mcfg, stream_seed(cfg.seed, streams::INIT))?;
    let mut params = initial.clone();
    let mut opt = AdamState::new(&params.tensors)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, streams::ORDER));
    let mut drop = dropout_streams(cfg.seed);
    let use_dropout = mcfg.dropout_rate > 0.0;

    let score = |p: &ModelParams, fallback: f64| -> Result<f64> {
        if dev.is_empty() {
            Ok(fallback)
        } else {
            eval_loss(p, mcfg, cfg.task_weights, dev, tasks)
        }
    };
    let (mut best, mut best_step, mut best_loss) = if dev.is_empty() {
        (initial.clone(), 0, f64::INFINITY)
    } else {
        (initial.clone(), 0, score(&initial, f64::INFINITY)?)
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let s = use_dropout.then_some(&mut drop);
        let out = train_step(&mut params, &mut opt, mcfg, cfg, &batch, tasks, s, step)?;
        let row = LogRow {
            step: step + 1,
            loss_total: out.loss,
            per_task: out.per_task,
            lr: out.lr,
        };
        progress(&row);
        log.push(row);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            let l = score(&params, out.loss)?;
            if l < best_loss {
                best_loss = l;
                best_step = done;
                best = params.clone();
            }
        }
    }
    Ok(TrainOutcome {
        initial,
        last: params,
        best,
        best_step,
        best_loss,
        log,
    })
}

/// Vocabulary, knowledge index and a model config sized to the vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub index: KnowledgeIndex,
    pub model: ModelConfig,
}

/// Builds the vocabulary from `records` plus the knowledge base, indexes
/// the knowledge base and fills in `vocab_size`.
pub fn prepare_corpus(
    records: &[Dialogue],
    kb: &[KnowledgeSnippet],
    run: &RunConfig,
) -> Result<Prepared> {
    let vocab = Vocabulary::build(&vocab_texts(records, kb), run.data.min_freq)?;
    let index = KnowledgeIndex::build(kb.to_vec())?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..run.model.clone()
    };
    model.validate()?;
    Ok(Prepared {
        vocab,
        index,
        model,
    })
}

impl Prepared {
    pub fn examples(&self, records: &[Dialogue], k: usize) -> Result<Vec<Example>> {
        prepare_examples(records, &self.vocab, Some(&self.index), k, &self.model)
    }
}

/// Random encoder input, knowledge, visual vector and targets for all
/// three tasks, sized to `cfg`. The input ends in two PAD positions so the
/// key mask is exercised.
pub fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Example> {
    let content = (special::COUNT as TokenId)..(cfg.vocab_size as TokenId);
    let n = (cfg.max_len / 2).clamp(3, cfg.max_len.saturating_sub(2).max(3));
    let mut ids = vec![special::BOS, special::PATIENT];
    while ids.len() < n - 1 {
        ids.push(rng.random_range(content.clone()));
    }
    ids.push(special::EOS);
    ids.truncate(cfg.max_len);
    let pad_to = (ids.len() + 2).min(cfg.max_len);
    let input = TokenSequence::new(ids)?.padded(pad_to);
    let knowledge = (0..2)
        .map(|i| {
            (0..2 + i)
                .map(|_| rng.random_range(content.clone()))
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let visual = (0..cfg.d_vis).map(|_| normal.sample(rng)).collect();
    let max_t = cfg.max_len.saturating_sub(2).clamp(1, 5);
    let targets = Task::ALL.map(|_| {
        let len = rng.random_range(1..=max_t);
        Some(
            (0..len)
                .map(|_| rng.random_range(content.clone()))
                .collect(),
        )
    });
    Ok(Example::new("random", input, knowledge, visual, targets))
}

/// Parameters drawn with a larger spread than the training init so that
/// every path (gates, attention, adapters) carries non-trivial gradient.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64, std: f64) -> Result<ModelParams> {
    let mut p = init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, streams::ORDER));
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    for t in p.tensors.values_mut() {
        for x in t.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Finite-difference check of the full multi-task loss (all three tasks,
/// both adapters) on one random example.
pub fn gradcheck_model(cfg: &ModelConfig, opts: CheckOptions) -> Result<CheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ex = random_example(cfg, &mut rng)?;
    let params = perturbed_params(cfg, opts.seed, 0.3)?;
    finite_diff_check(
        |g, b| {
            let losses = multitask_forward(g, b, cfg, &[&ex], &Task::ALL, None)?;
            joint_loss(g, &losses, [1.0, 2.0, 3.0])
        },
        &params.tensors,
        opts,
    )
}

/// One named task subset of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub name: String,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub runs: Vec<AblationRun>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    /// MM-MDS, with-MCS, with-DI and MMK-Summation over `seeds`.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let run = |name: &str, tasks: &[Task]| AblationRun {
            name: name.to_string(),
            tasks: tasks.to_vec(),
        };
        AblationSpec {
            runs: vec![
                run("MM-MDS", &[Task::Sum]),
                run("with-MCS", &[Task::Sum, Task::Mcs]),
                run("with-DI", &[Task::Sum, Task::Di]),
                run("MMK-Summation", &[Task::Sum, Task::Mcs, Task::Di]),
            ],
            seeds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub model: String,
    pub seed: u64,
    pub result: std::result::Result<MetricReport, String>,
}

/// Published Table 1 figures for two of the grid rows. Only the columns the
/// source reports are filled in.
pub fn paper_reference_rows() -> Vec<(String, BTreeMap<&'static str, f64>)> {
    vec![
        (
            "MMK-Summation".to_string(),
            BTreeMap::from([
                ("BLEU", 33.47),
                ("R-1", 60.86),
                ("R-2", 37.43),
                ("ROUGE-L", 51.05),
            ]),
        ),
        (
            "MM-MDS".to_string(),
            BTreeMap::from([("BLEU", 32.48), ("METEOR", 54.67)]),
        ),
    ]
}

/// Everything the ablation grid needs besides the spec.
pub struct AblationData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: &'a [Example],
    /// Gold summaries of `test`, in order.
    pub test_refs: &'a [String],
    pub vocab: &'a Vocabulary,
}

/// Trains and scores every (run, seed) pair on the same split. Each row
/// holds the mean summary-task report on the test split or the error text.
pub fn run_ablation(
    data: &AblationData,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    dcfg: &DecodeConfig,
    mopts: MetricOptions,
    spec: &AblationSpec,
    mut progress: impl FnMut(&str, u64, &std::result::Result<MetricReport, String>),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for run in &spec.runs {
        for &seed in &spec.seeds {
            let cfg = TrainConfig {
                seed,
                ..tcfg.clone()
            };
            let result = (|| -> Result<MetricReport> {
                let out = train_loop(data.train, data.dev, mcfg, &cfg, &run.tasks, |_| {})?;
                let model = Model {
                    cfg: mcfg.clone(),
                    params: out.best,
                };
                let EvalOutcome { mean, .. } = evaluate_examples(
                    &model,
                    data.vocab,
                    data.test,
                    data.test_refs,
                    Task::Sum,
                    dcfg,
                    mopts,
                )?;
                Ok(mean)
            })()
            .map_err(|e| e.to_string());
            progress(&run.name, seed, &result);
            rows.push(AblationRow {
                model: run.name.clone(),
                seed,
                result,
            });
        }
    }
    rows
}
