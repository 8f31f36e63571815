//! Greedy and beam decoding over any next-token scorer.

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::knowledge::{encode_knowledge, KnowledgeIndex};
use crate::model::{decode_step, encode, prepare_example, Encoded, Example, Model};
use crate::numerics::{Bindings, Graph, Tensor};
use crate::textproc::{decode_tokens, special, TokenId, Vocabulary};
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: 4,
            max_new_tokens: 40,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_width: 1,
            max_new_tokens,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam_width must be at least 1"));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::config("length_penalty must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Log-probabilities of the next token given the tokens generated so far
/// (the BOS/task prefix is implicit).
pub trait NextTokenScorer {
    fn log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>>;
}

/// A finished or truncated path. `tokens` excludes the final EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub ended: bool,
}

impl Hypothesis {
    /// Length used by the penalty; a closing EOS counts.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    /// `log_prob / length^α`.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.log_prob;
        }
        self.log_prob / (self.length().max(1) as f64).powf(alpha)
    }
}

/// Arg-max decoding; ties go to the lowest token id.
pub fn greedy<S: NextTokenScorer>(scorer: &mut S, max_new_tokens: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
    };
    for _ in 0..max_new_tokens {
        let lp = scorer.log_probs(&h.tokens)?;
        let (best, &v) = lp
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            })
            .ok_or_else(|| Error::contract("scorer returned an empty distribution"))?;
        h.log_prob += v;
        if best as TokenId == special::EOS {
            h.ended = true;
            break;
        }
        h.tokens.push(best as TokenId);
    }
    Ok(h)
}

/// Beam search. Each step keeps the `width` best expansions of all live
/// beams (ties: lower beam index, then lower token id); expansions ending in
/// EOS leave the beam, so it can shrink. Paths still live after
/// `max_new_tokens` compete as truncated hypotheses. The winner maximises
/// [`Hypothesis::score`]; earlier-created candidates win ties.
pub fn beam_search<S: NextTokenScorer>(
    scorer: &mut S,
    width: usize,
    max_new_tokens: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::config("beam_width must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        ended: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new_tokens {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            cands.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(t, v)| (h.log_prob + v, b, t)),
            );
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, b, t) in cands {
            let mut tokens = live[b].tokens.clone();
            if t as TokenId == special::EOS {
                done.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    ended: true,
                });
            } else {
                tokens.push(t as TokenId);
                next.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    ended: false,
                });
            }
        }
        live = next;
    }
    done.extend(live);
    let mut best: Option<Hypothesis> = None;
    for h in done {
        if best
            .as_ref()
            .is_none_or(|b| h.score(alpha) > b.score(alpha))
        {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

/// Scores prefixes with a trained model. Parameters and encoder states
/// live at the front of one graph; each query appends a decoder pass and
/// rewinds it afterwards.
pub struct ModelScorer<'m> {
    model: &'m Model,
    graph: Graph,
    params: Bindings,
    enc: Encoded,
    task: Task,
    prefix: Vec<TokenId>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, ex: &Example, task: Task) -> Result<Self> {
        let mut graph = Graph::new();
        let params = Bindings::constants(&mut graph, &model.params.tensors);
        let know = encode_knowledge(&mut graph, &params, &ex.knowledge, model.cfg.d_know)?;
        let vis = graph.constant(Tensor::new(vec![1, ex.visual.len()], ex.visual.clone())?);
        let enc = encode(
            &mut graph,
            &params,
            &model.cfg,
            ex.input.ids(),
            know,
            vis,
            None,
        )?;
        Ok(ModelScorer {
            model,
            graph,
            params,
            enc,
            task,
            prefix: Vec::new(),
        })
    }

    /// Longest generation the positional table allows.
    pub fn max_new_tokens(&self) -> usize {
        self.model.cfg.max_len - 1
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn log_probs(&mut self, generated: &[TokenId]) -> Result<Vec<f64>> {
        self.prefix.clear();
        self.prefix.push(special::BOS);
        self.prefix.push(self.task.token());
        self.prefix.extend_from_slice(generated);
        let mark = self.graph.mark();
        let logits = decode_step(
            &mut self.graph,
            &self.params,
            &self.model.cfg,
            &self.prefix,
            &self.enc,
            None,
        )?;
        let t = self.graph.value(logits);
        let row = t.row(t.dims2()?.0 - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = row
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let id = i as TokenId;
                // only EOS among the reserved ids may be generated
                if special::is_special(id) && id != special::EOS {
                    f64::NEG_INFINITY
                } else {
                    x - lse
                }
            })
            .collect();
        self.graph.rewind(mark);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub score: f64,
    pub log_prob: f64,
}

/// Decodes `task` for a prepared example.
pub fn generate(
    model: &Model,
    vocab: &Vocabulary,
    ex: &Example,
    task: Task,
    dcfg: &DecodeConfig,
) -> Result<Generated> {
    dcfg.validate()?;
    let mut scorer = ModelScorer::new(model, ex, task)?;
    let max_new = dcfg.max_new_tokens.min(scorer.max_new_tokens());
    let (h, alpha) = match dcfg.strategy {
        Strategy::Greedy => (greedy(&mut scorer, max_new)?, 0.0),
        Strategy::Beam => (
            beam_search(&mut scorer, dcfg.beam_width, max_new, dcfg.length_penalty)?,
            dcfg.length_penalty,
        ),
    };
    Ok(Generated {
        text: decode_tokens(&h.tokens, vocab)?,
        score: h.score(alpha),
        log_prob: h.log_prob,
        tokens: h.tokens,
    })
}

/// Retrieval, encoding and decoding for a raw dialogue.
pub fn generate_for_dialogue(
    model: &Model,
    vocab: &Vocabulary,
    kb: Option<&KnowledgeIndex>,
    k: usize,
    d: &Dialogue,
    task: Task,
    dcfg: &DecodeConfig,
) -> Result<Generated> {
    let ex = prepare_example(d, vocab, kb, k, &model.cfg)?;
    generate(model, vocab, &ex, task, dcfg)
}
