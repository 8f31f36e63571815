use super::ModelConfig;
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::knowledge::{description_ids, KnowledgeIndex};
use crate::textproc::{encode_dialogue, TokenId, TokenSequence, Vocabulary};
use crate::Task;

/// A dialogue with everything the model consumes precomputed: encoder ids,
/// retrieved knowledge description ids, the visual vector (zeros when
/// absent) and per-task target ids without BOS/TASK/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: TokenSequence,
    /// KB entry indices in rank order.
    pub retrieved: Vec<usize>,
    pub knowledge: Vec<Vec<TokenId>>,
    pub visual: Vec<f64>,
    targets: [Option<Vec<TokenId>>; 3],
}

impl Example {
    /// Builds an example from already-encoded parts; `targets` is indexed
    /// by [`Task::index`].
    pub fn new(
        id: impl Into<String>,
        input: TokenSequence,
        knowledge: Vec<Vec<TokenId>>,
        visual: Vec<f64>,
        targets: [Option<Vec<TokenId>>; 3],
    ) -> Self {
        Example {
            id: id.into(),
            input,
            retrieved: Vec::new(),
            knowledge,
            visual,
            targets,
        }
    }

    pub fn target(&self, task: Task) -> Result<&[TokenId]> {
        self.targets[task.index()].as_deref().ok_or_else(|| {
            Error::Dataset(format!("record `{}` has no gold {task} target", self.id))
        })
    }

    pub fn has_target(&self, task: Task) -> bool {
        self.targets[task.index()].is_some()
    }
}

/// Prepares one dialogue. Retrieval runs once here so training and decoding
/// see the same knowledge. `kb = None` gives an empty knowledge list (zero
/// knowledge vector).
pub fn prepare_example(
    d: &Dialogue,
    vocab: &Vocabulary,
    kb: Option<&KnowledgeIndex>,
    k: usize,
    cfg: &ModelConfig,
) -> Result<Example> {
    let input = encode_dialogue(d, vocab, cfg.max_len)?;
    let hits = match kb {
        Some(idx) => idx.retrieve(&input, vocab, k)?,
        None => Vec::new(),
    };
    let visual = match &d.visual {
        Some(v) if v.len() != cfg.d_vis => {
            return Err(Error::config(format!(
                "record `{}` has a {}-dim visual vector, model expects d_vis = {}",
                d.id,
                v.len(),
                cfg.d_vis
            )))
        }
        Some(v) => v.clone(),
        None => vec![0.0; cfg.d_vis],
    };
    // room for BOS and the task token in front
    let keep = cfg.max_len - 2;
    let targets = Task::ALL.map(|t| {
        let text = d.targets.get(t);
        if text.trim().is_empty() {
            None
        } else {
            let mut ids = vocab.encode_text(text);
            ids.truncate(keep);
            Some(ids)
        }
    });
    Ok(Example {
        id: d.id.clone(),
        input,
        retrieved: hits.iter().map(|h| h.entry).collect(),
        knowledge: description_ids(&hits, vocab),
        visual,
        targets,
    })
}

pub fn prepare_examples(
    ds: &[Dialogue],
    vocab: &Vocabulary,
    kb: Option<&KnowledgeIndex>,
    k: usize,
    cfg: &ModelConfig,
) -> Result<Vec<Example>> {
    ds.iter()
        .map(|d| prepare_example(d, vocab, kb, k, cfg))
        .collect()
}
