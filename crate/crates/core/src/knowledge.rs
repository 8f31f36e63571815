//! External knowledge: a TF-IDF cosine retriever over term/description
//! entries, and pooling of retrieved descriptions into a modality vector.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SchemaViolation;
use crate::error::{Error, Result};
use crate::numerics::{Bindings, Graph, Tensor, Var};
use crate::textproc::{self, special, TokenId, TokenSequence, Vocabulary};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSnippet {
    pub term: String,
    pub description: String,
}

#[derive(Debug, Clone)]
pub struct KnowledgeIndex {
    entries: Vec<KnowledgeSnippet>,
    postings: BTreeMap<String, Vec<usize>>,
    idf: BTreeMap<String, f64>,
    /// Unit-norm tf-idf weights per entry.
    vectors: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Retrieved {
    pub entry: usize,
    pub snippet: KnowledgeSnippet,
    pub score: f64,
}

fn entry_tokens(s: &KnowledgeSnippet) -> Vec<String> {
    let mut toks = textproc::tokenize(&s.term);
    toks.extend(textproc::tokenize(&s.description));
    toks
}

fn counts<'a>(tokens: impl IntoIterator<Item = &'a String>) -> BTreeMap<&'a str, usize> {
    let mut c = BTreeMap::new();
    for t in tokens {
        *c.entry(t.as_str()).or_insert(0) += 1;
    }
    c
}

impl KnowledgeIndex {
    pub fn build(entries: Vec<KnowledgeSnippet>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dataset("knowledge base has no entries".into()));
        }
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            let term = textproc::normalize(&e.term);
            for (field, value) in [
                ("term", &term),
                ("description", &textproc::normalize(&e.description)),
            ] {
                if value.is_empty() {
                    return Err(Error::Schema {
                        line: i + 1,
                        field: field.into(),
                        kind: SchemaViolation::EmptyKnowledgeField,
                        message: format!("knowledge entry has an empty {field}"),
                    });
                }
            }
            if !seen.insert(term.clone()) {
                return Err(Error::Schema {
                    line: i + 1,
                    field: "term".into(),
                    kind: SchemaViolation::DuplicateTerm,
                    message: format!("duplicate knowledge term `{term}`"),
                });
            }
        }

        let tokenized: Vec<Vec<String>> = entries.iter().map(entry_tokens).collect();
        let mut postings: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, toks) in tokenized.iter().enumerate() {
            for t in counts(toks).into_keys() {
                postings.entry(t.to_string()).or_default().push(i);
            }
        }
        let n = entries.len() as f64;
        let idf: BTreeMap<String, f64> = postings
            .iter()
            .map(|(t, ids)| (t.clone(), smoothed_idf(n, ids.len() as f64)))
            .collect();
        let vectors = tokenized
            .iter()
            .map(|toks| {
                let mut v: BTreeMap<String, f64> = counts(toks)
                    .into_iter()
                    .map(|(t, c)| (t.to_string(), c as f64 * idf[t]))
                    .collect();
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                v.values_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        Ok(KnowledgeIndex {
            entries,
            postings,
            idf,
            vectors,
        })
    }

    pub fn entries(&self) -> &[KnowledgeSnippet] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smoothed idf of a token; tokens absent from every entry get the
    /// df = 0 value.
    pub fn idf(&self, token: &str) -> f64 {
        self.idf
            .get(token)
            .copied()
            .unwrap_or_else(|| smoothed_idf(self.entries.len() as f64, 0.0))
    }

    pub fn entry_vector(&self, entry: usize) -> &BTreeMap<String, f64> {
        &self.vectors[entry]
    }

    /// Cosine similarity between two entries' tf-idf vectors.
    pub fn entry_cosine(&self, a: usize, b: usize) -> f64 {
        let (va, vb) = (&self.vectors[a], &self.vectors[b]);
        va.iter()
            .filter_map(|(t, x)| vb.get(t).map(|y| x * y))
            .sum()
    }

    /// Top-`k` entries by cosine with the query tokens. Zero scores are
    /// dropped, ties keep entry order.
    pub fn retrieve_tokens<S: AsRef<str>>(&self, query: &[S], k: usize) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::config("retrieval k must be at least 1"));
        }
        let q = counts_owned(query);
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let qw: BTreeMap<&str, f64> = q
            .iter()
            .map(|(t, &c)| (t.as_str(), c as f64 * self.idf(t)))
            .collect();
        let qnorm = qw.values().map(|x| x * x).sum::<f64>().sqrt();

        let mut dots: BTreeMap<usize, f64> = BTreeMap::new();
        for (t, w) in &qw {
            if let Some(ids) = self.postings.get(*t) {
                for &i in ids {
                    *dots.entry(i).or_insert(0.0) += w * self.vectors[i][*t];
                }
            }
        }
        let mut scored: Vec<(usize, f64)> = dots
            .into_iter()
            .map(|(i, d)| (i, (d / qnorm).min(1.0)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(entry, score)| Retrieved {
                entry,
                snippet: self.entries[entry].clone(),
                score,
            })
            .collect())
    }

    /// Retrieval with an encoded context; special tokens (speaker tags,
    /// separators, UNK) are not part of the query.
    pub fn retrieve(
        &self,
        context: &TokenSequence,
        vocab: &Vocabulary,
        k: usize,
    ) -> Result<Vec<Retrieved>> {
        let query: Vec<&str> = context
            .ids()
            .iter()
            .filter(|&&id| !special::is_special(id))
            .map(|&id| {
                vocab
                    .token(id)
                    .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))
            })
            .collect::<Result<_>>()?;
        self.retrieve_tokens(&query, k)
    }

    pub fn retrieve_text(&self, text: &str, k: usize) -> Result<Vec<Retrieved>> {
        self.retrieve_tokens(&textproc::tokenize(text), k)
    }
}

fn counts_owned<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, usize> {
    let mut c = BTreeMap::new();
    for t in tokens {
        *c.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    c
}

fn smoothed_idf(n: f64, df: f64) -> f64 {
    ((1.0 + n) / (1.0 + df)).ln() + 1.0
}

/// Token ids of each retrieved description, as cached on a prepared example.
pub fn description_ids(hits: &[Retrieved], vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    hits.iter()
        .map(|h| vocab.encode_text(&h.snippet.description))
        .collect()
}

/// Mean over snippets of the mean token embedding of each description; the
/// zero vector when nothing was retrieved. Gradients reach the embedding
/// table through the gathers.
pub fn encode_knowledge(
    g: &mut Graph,
    params: &Bindings,
    snippets: &[Vec<TokenId>],
    d_know: usize,
) -> Result<Var> {
    let pooled: Vec<Var> = snippets
        .iter()
        .filter(|ids| !ids.is_empty())
        .map(|ids| {
            let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            let emb = g.gather(params.get(crate::model::names::TOK_EMBED)?, &ids)?;
            g.mean_rows(emb)
        })
        .collect::<Result<_>>()?;
    if pooled.is_empty() {
        return Ok(g.constant(Tensor::zeros(vec![1, d_know])?));
    }
    let stacked = g.concat_rows(&pooled)?;
    let v = g.mean_rows(stacked)?;
    let d = g.value(v).last_dim();
    if d != d_know {
        return Err(Error::config(format!(
            "knowledge vector has {d} dims, model expects d_know = {d_know}"
        )));
    }
    Ok(v)
}

/// Reads a JSON Lines knowledge base: `{"term": ..., "description": ...}`.
pub fn load_kb(path: &Path) -> Result<Vec<KnowledgeSnippet>> {
    let text = crate::io::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let snippet: KnowledgeSnippet = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: i + 1,
            field: "$".into(),
            kind: SchemaViolation::MalformedJson,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(snippet);
    }
    Ok(out)
}

pub fn kb_to_jsonl(entries: &[KnowledgeSnippet]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("snippet serializes"));
        s.push('\n');
    }
    s
}

pub fn save_kb(path: &Path, entries: &[KnowledgeSnippet]) -> Result<()> {
    crate::io::write_atomic(path, kb_to_jsonl(entries).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(pairs: &[(&str, &str)]) -> KnowledgeIndex {
        KnowledgeIndex::build(
            pairs
                .iter()
                .map(|(t, d)| KnowledgeSnippet {
                    term: t.to_string(),
                    description: d.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn norm(v: &BTreeMap<String, f64>) -> f64 {
        v.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn single_entry_is_unit_norm() {
        let idx = kb(&[("fever", "raised body temperature")]);
        assert!((norm(idx.entry_vector(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_entries_are_orthogonal() {
        let idx = kb(&[("fever", "raised temperature"), ("rash", "skin eruption")]);
        assert_eq!(idx.entry_cosine(0, 1), 0.0);
    }

    #[test]
    fn idf_formula() {
        let idx = kb(&[
            ("fever", "common sign"),
            ("rash", "common mark"),
            ("cough", "airway reflex"),
        ]);
        // ln((1+N)/(1+df)) + 1
        assert!((idx.idf("common") - ((4.0f64 / 3.0).ln() + 1.0)).abs() < 1e-15);
        assert!((idx.idf("fever") - (2.0f64.ln() + 1.0)).abs() < 1e-15);
        assert!(idx.idf("common") < idx.idf("fever"));
        let all = kb(&[("a", "shared"), ("b", "shared")]);
        assert!(all.idf("shared") < all.idf("a"));
        assert!(all.idf("shared") > 0.0);
    }

    #[test]
    fn duplicate_terms_rejected_by_name() {
        let err = KnowledgeIndex::build(vec![
            KnowledgeSnippet {
                term: "Fever".into(),
                description: "x".into(),
            },
            KnowledgeSnippet {
                term: "fever".into(),
                description: "y".into(),
            },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("`fever`"), "{err}");
        assert!(KnowledgeIndex::build(vec![]).is_err());
    }

    #[test]
    fn retrieves_only_overlapping_entry() {
        let idx = kb(&[
            ("fever", "raised temperature"),
            ("photophobia", "light sensitivity"),
        ]);
        let hits = idx
            .retrieve_text("my eyes hurt , photophobia since monday", 3)
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].snippet.term, "photophobia");
        assert!(idx
            .retrieve_text("nothing relevant here", 3)
            .unwrap()
            .is_empty());
        let empty: [&str; 0] = [];
        assert!(idx.retrieve_tokens(&empty, 3).unwrap().is_empty());
    }

    #[test]
    fn large_k_returns_all_nonzero() {
        let idx = kb(&[
            ("fever", "raised temperature"),
            ("rash", "skin change"),
            ("cough", "airway reflex"),
        ]);
        let hits = idx.retrieve_text("fever and rash", 10).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.score > 0.0 && h.score <= 1.0));
    }

    #[test]
    fn ties_follow_entry_order() {
        let idx = kb(&[("alpha", "same words"), ("beta", "same words")]);
        let hits = idx.retrieve_text("same words", 2).unwrap();
        assert_eq!(hits[0].entry, 0);
        assert_eq!(hits[1].entry, 1);
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn identical_text_scores_one() {
        let idx = kb(&[("fever", "raised body temperature"), ("rash", "skin")]);
        let hits = idx
            .retrieve_text("fever raised body temperature", 1)
            .unwrap();
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_not_monotone_in_general() {
        // The query already points almost entirely along `fever`; one more
        // `fever` tilts it away from the entry, which also weights `raised`.
        let idx = kb(&[("fever", "raised"), ("other", "thing")]);
        let base: Vec<&str> = std::iter::repeat_n("fever", 10).chain(["raised"]).collect();
        let mut more = base.clone();
        more.push("fever");
        let s0 = idx.retrieve_tokens(&base, 1).unwrap()[0].score;
        let s1 = idx.retrieve_tokens(&more, 1).unwrap()[0].score;
        assert!(s1 < s0);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.jsonl");
        let entries = vec![KnowledgeSnippet {
            term: "fever".into(),
            description: "raised temperature".into(),
        }];
        save_kb(&p, &entries).unwrap();
        assert_eq!(load_kb(&p).unwrap(), entries);
    }
}
