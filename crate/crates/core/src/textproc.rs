//! Vocabulary construction and speaker-aware tokenization.
//!
//! Text is normalized (NFC, lowercase, whitespace collapsed) and split into
//! words; every character that is neither alphanumeric nor whitespace becomes
//! a token of its own.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{Dialogue, Speaker};
use crate::error::{Error, Result};
use crate::Task;

pub type TokenId = u32;

/// Reserved ids. Their order is fixed.
pub mod special {
    use super::TokenId;
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const SEP: TokenId = 4;
    pub const PATIENT: TokenId = 5;
    pub const DOCTOR: TokenId = 6;
    pub const TASK_SUM: TokenId = 7;
    pub const TASK_MCS: TokenId = 8;
    pub const TASK_DI: TokenId = 9;
    pub const KNOW: TokenId = 10;

    pub const COUNT: usize = 11;

    pub const NAMES: [&str; COUNT] = [
        "<pad>",
        "<bos>",
        "<eos>",
        "<unk>",
        "<sep>",
        "<patient>",
        "<doctor>",
        "<sum>",
        "<mcs>",
        "<di>",
        "<know>",
    ];

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < COUNT
    }

    pub fn is_task(id: TokenId) -> bool {
        (TASK_SUM..=TASK_DI).contains(&id)
    }
}

pub const NORMALIZATION_TAG: &str = "nfc+lowercase+collapse-whitespace";
const VOCAB_FORMAT_VERSION: u32 = 1;

/// NFC, lowercase, single spaces between tokens.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Normalized word-level tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for c in lowered.chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    normalization: String,
    min_freq: usize,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Specials plus every token seen at least `min_freq` times; ids ordered
    /// by descending frequency, ties lexicographic.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Vocab("min_freq must be at least 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::Vocab(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = special::NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, min_freq)
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < special::COUNT
            || tokens[..special::COUNT]
                .iter()
                .zip(special::NAMES)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Vocab(
                "special tokens must occupy ids 0..10 in canonical order".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content ids of a text, unknown words mapped to UNK.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            normalization: NORMALIZATION_TAG.to_string(),
            min_freq: self.min_freq,
            tokens: self.tokens.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Vocab(format!(
                "vocabulary format version {} is not supported (expected {VOCAB_FORMAT_VERSION})",
                file.version
            )));
        }
        if file.normalization != NORMALIZATION_TAG {
            return Err(Error::Vocab(format!(
                "unknown normalization `{}`",
                file.normalization
            )));
        }
        Self::from_tokens(file.tokens, file.min_freq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Token ids with padding only as a suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if let Some(first_pad) = ids.iter().position(|&t| t == special::PAD) {
            if ids[first_pad..].iter().any(|&t| t != special::PAD) {
                return Err(Error::contract("padding inside token sequence"));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length without trailing padding.
    pub fn content_len(&self) -> usize {
        self.ids
            .iter()
            .position(|&t| t == special::PAD)
            .unwrap_or(self.ids.len())
    }

    /// Right-pads to `len` (no-op when already at least that long).
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, special::PAD);
        }
        TokenSequence { ids }
    }
}

fn truncate_with_eos(mut ids: Vec<TokenId>, max_len: usize) -> Vec<TokenId> {
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(special::EOS);
    }
    ids
}

/// `BOS, (PATIENT|DOCTOR) tokens..., SEP, ..., EOS`, truncated from the tail
/// with EOS kept last.
pub fn encode_dialogue(d: &Dialogue, v: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if d.utterances.is_empty() {
        return Err(Error::Dataset(format!(
            "dialogue `{}` has no utterances",
            d.id
        )));
    }
    if max_len < 2 {
        return Err(Error::config(format!(
            "max_len {max_len} cannot hold BOS and EOS"
        )));
    }
    let mut ids = vec![special::BOS];
    for (i, u) in d.utterances.iter().enumerate() {
        if i > 0 {
            ids.push(special::SEP);
        }
        ids.push(match u.speaker {
            Speaker::Patient => special::PATIENT,
            Speaker::Doctor => special::DOCTOR,
        });
        ids.extend(v.encode_text(&u.text));
    }
    ids.push(special::EOS);
    TokenSequence::new(truncate_with_eos(ids, max_len))
}

/// Decoder sequence `BOS, TASK, tokens..., EOS` for a gold target.
pub fn encode_target(
    text: &str,
    task: Task,
    v: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::config(format!(
            "max_len {max_len} cannot hold BOS, task and EOS"
        )));
    }
    let mut ids = vec![special::BOS, task.token()];
    ids.extend(v.encode_text(text));
    ids.push(special::EOS);
    TokenSequence::new(truncate_with_eos(ids, max_len))
}

/// Joins non-special tokens with single spaces.
pub fn decode_tokens(ids: &[TokenId], v: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = v.token(id).ok_or_else(|| {
            Error::Vocab(format!(
                "token id {id} out of range for vocabulary of {}",
                v.len()
            ))
        })?;
        if !special::is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
