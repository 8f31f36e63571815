//! Text-generation metrics: BLEU-1..4, ROUGE-1/2/L, METEOR-lite, Jaccard and
//! a greedy-matching embedding similarity.
//!
//! Corpus scores are the arithmetic mean of per-record scores for every
//! metric, BLEU included. That is sentence-level BLEU averaged over records,
//! not corpus-level BLEU with pooled n-gram counts.
//!
//! METEOR-lite aligns unigrams in two stages, exact then stem, each
//! leftmost-greedy. There is no synonym stage. The stemmer strips the first
//! matching suffix from this list, provided at least three characters
//! remain: `sses→ss`, `ies→y`, `ing`, `ed`, `ly`, `s` (not after `ss`).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::textproc::{self, TokenId, Vocabulary};

/// How the headline BLEU column is formed from the per-order scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuComposite {
    /// `BP · exp(mean log p_n)` over n = 1..4 (standard BLEU-4).
    #[default]
    Geometric,
    /// Arithmetic mean of the cumulative B-1..B-4 scores.
    MeanOfOrders,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScores {
    /// Cumulative BLEU-n for n = 1..=max_n, ×100.
    pub per_n: Vec<f64>,
    pub composite: f64,
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(h: &HashMap<Vec<&str>, usize>, r: &HashMap<Vec<&str>, usize>) -> usize {
    h.iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Sentence BLEU with clipped n-gram precision, brevity penalty and add-one
/// smoothing of zero-match orders n ≥ 2. Orders longer than the hypothesis
/// are left out of the mean.
pub fn bleu<S: AsRef<str>>(
    hyp: &[S],
    reference: &[S],
    max_n: usize,
    composite: BleuComposite,
) -> BleuScores {
    let zeros = || BleuScores {
        per_n: vec![0.0; max_n],
        composite: 0.0,
    };
    if hyp.is_empty() || reference.is_empty() || max_n == 0 {
        return zeros();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c <= r { (1.0 - r / c).exp() } else { 1.0 };

    let mut log_sum = 0.0;
    let mut available = 0usize;
    let mut per_n = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        if hyp.len() >= n {
            let total = hyp.len() - n + 1;
            let matches = clipped_overlap(&ngram_counts(hyp, n), &ngram_counts(reference, n));
            let p = if matches == 0 && n >= 2 {
                1.0 / (total as f64 + 1.0)
            } else {
                matches as f64 / total as f64
            };
            log_sum += p.ln();
            available += 1;
        }
        let score = 100.0 * bp * (log_sum / available as f64).exp();
        per_n.push(if score.is_finite() { score } else { 0.0 });
    }
    let composite = match composite {
        BleuComposite::Geometric => per_n[max_n - 1],
        BleuComposite::MeanOfOrders => per_n.iter().sum::<f64>() / max_n as f64,
    };
    BleuScores { per_n, composite }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// ROUGE-N F1, ×100.
pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> f64 {
    let (h, r) = (ngram_counts(hyp, n), ngram_counts(reference, n));
    let (hn, rn): (usize, usize) = (h.values().sum(), r.values().sum());
    if hn == 0 || rn == 0 {
        return 0.0;
    }
    let overlap = clipped_overlap(&h, &r) as f64;
    100.0 * f1(overlap / hn as f64, overlap / rn as f64)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence, ×100.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    100.0 * f1(l / hyp.len() as f64, l / reference.len() as f64)
}

const SUFFIX_RULES: [(&str, &str); 6] = [
    ("sses", "ss"),
    ("ies", "y"),
    ("ing", ""),
    ("ed", ""),
    ("ly", ""),
    ("s", ""),
];

pub fn stem(word: &str) -> String {
    for (suffix, repl) in SUFFIX_RULES {
        if let Some(base) = word.strip_suffix(suffix) {
            if suffix == "s" && base.ends_with('s') {
                continue;
            }
            let stemmed = format!("{base}{repl}");
            if stemmed.chars().count() >= 3 {
                return stemmed;
            }
        }
    }
    word.to_string()
}

/// Unigram alignment `(hyp index, ref index)` by exact match, then by stem,
/// each stage leftmost-greedy over unmatched tokens. Sorted by hyp index.
pub fn meteor_alignment<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut h_used = vec![false; hyp.len()];
    let mut r_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stages: [&dyn Fn(&str) -> String; 2] = [&|w: &str| w.to_string(), &stem];
    for key in stages {
        let rkeys: Vec<String> = reference.iter().map(|w| key(w.as_ref())).collect();
        for (i, w) in hyp.iter().enumerate() {
            if h_used[i] {
                continue;
            }
            let k = key(w.as_ref());
            if let Some(j) = (0..reference.len()).find(|&j| !r_used[j] && rkeys[j] == k) {
                h_used[i] = true;
                r_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR without synonymy, ×100.
pub fn meteor_lite<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let pairs = meteor_alignment(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

/// Token-set Jaccard similarity in `[0, 1]`; two empty sets score 1.
pub fn jaccard<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let a: HashSet<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = reference.iter().map(AsRef::as_ref).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching embedding similarity: F1 of the mean best cosine from
/// hypothesis to reference tokens and vice versa. This is an in-model
/// stand-in, not BERTScore. Negative best-match means are clamped to 0.
pub fn embed_sim(hyp: &[TokenId], reference: &[TokenId], embeddings: &Tensor) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let row = |id: TokenId| embeddings.row(id as usize);
    let best = |from: &[TokenId], to: &[TokenId]| {
        from.iter()
            .map(|&a| {
                to.iter()
                    .map(|&b| cosine(row(a), row(b)))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(hyp, reference).max(0.0);
    let r = best(reference, hyp).max(0.0);
    f1(p, r).min(1.0)
}

/// One row of scores: BLEU/ROUGE/METEOR on 0–100, Jaccard and EmbedSim on 0–1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub bleu: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub meteor: f64,
    pub jaccard: f64,
    pub embed_sim: f64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "B-1", "B-2", "B-3", "B-4", "BLEU", "R-1", "R-2", "ROUGE-L", "METEOR", "Jaccard", "EmbedSim",
];

/// Embedding source for `embed_sim`.
pub struct Embeddings<'a> {
    pub vocab: &'a Vocabulary,
    pub table: &'a Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub bleu_composite: BleuComposite,
}

impl MetricReport {
    pub fn score(
        hyp: &str,
        reference: &str,
        emb: Option<&Embeddings>,
        opts: MetricOptions,
    ) -> Self {
        let h = textproc::tokenize(hyp);
        let r = textproc::tokenize(reference);
        let b = bleu(&h, &r, 4, opts.bleu_composite);
        let embed_sim = emb.map_or(0.0, |e| {
            let ids = |t: &[String]| t.iter().map(|w| e.vocab.id(w)).collect::<Vec<_>>();
            embed_sim(&ids(&h), &ids(&r), e.table)
        });
        MetricReport {
            b1: b.per_n[0],
            b2: b.per_n[1],
            b3: b.per_n[2],
            b4: b.per_n[3],
            bleu: b.composite,
            r1: rouge_n(&h, &r, 1),
            r2: rouge_n(&h, &r, 2),
            rl: rouge_l(&h, &r),
            meteor: meteor_lite(&h, &r),
            jaccard: jaccard(&h, &r),
            embed_sim,
        }
    }

    pub fn values(&self) -> [f64; 11] {
        [
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.bleu,
            self.r1,
            self.r2,
            self.rl,
            self.meteor,
            self.jaccard,
            self.embed_sim,
        ]
    }

    pub fn from_values(v: [f64; 11]) -> Self {
        MetricReport {
            b1: v[0],
            b2: v[1],
            b3: v[2],
            b4: v[3],
            bleu: v[4],
            r1: v[5],
            r2: v[6],
            rl: v[7],
            meteor: v[8],
            jaccard: v[9],
            embed_sim: v[10],
        }
    }

    /// Arithmetic mean of per-record reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let (mean, _) = Self::mean_std(reports);
        mean
    }

    /// Mean and sample standard deviation (zero for fewer than two rows).
    pub fn mean_std(reports: &[MetricReport]) -> (MetricReport, MetricReport) {
        let n = reports.len();
        if n == 0 {
            return (MetricReport::default(), MetricReport::default());
        }
        let mut mean = [0.0; 11];
        for r in reports {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / n as f64;
            }
        }
        let mut std = [0.0; 11];
        if n > 1 {
            for r in reports {
                for ((s, v), m) in std.iter_mut().zip(r.values()).zip(mean) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in &mut std {
                *s = (*s / (n - 1) as f64).sqrt();
            }
        }
        (Self::from_values(mean), Self::from_values(std))
    }
}

pub fn csv_header() -> String {
    format!("model,{}", CSV_COLUMNS.join(","))
}

fn fmt_value(i: usize, v: f64) -> String {
    if i >= 9 {
        format!("{v:.4}")
    } else {
        format!("{v:.2}")
    }
}

pub fn csv_row(model: &str, r: &MetricReport) -> String {
    let vals: Vec<String> = r
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| fmt_value(i, v))
        .collect();
    format!("{model},{}", vals.join(","))
}

/// Markdown table; `std` rows, when given, render as `mean ± std`.
pub fn markdown_table(rows: &[(String, MetricReport, Option<MetricReport>)]) -> String {
    let mut s = format!("| Model | {} |\n", CSV_COLUMNS.join(" | "));
    s.push_str(&format!("|---|{}\n", "---|".repeat(CSV_COLUMNS.len())));
    for (name, mean, std) in rows {
        let cells: Vec<String> = mean
            .values()
            .iter()
            .enumerate()
            .map(|(i, &m)| match std {
                Some(sd) => format!("{} ± {}", fmt_value(i, m), fmt_value(i, sd.values()[i])),
                None => fmt_value(i, m),
            })
            .collect();
        s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        textproc::tokenize(s)
    }

    #[test]
    fn bleu_identity_is_100() {
        let x = t("the patient reports fever and cough");
        let b = bleu(&x, &x, 4, BleuComposite::Geometric);
        assert_eq!(b.per_n, vec![100.0; 4]);
        assert_eq!(b.composite, 100.0);
        let short = t("fever");
        assert_eq!(
            bleu(&short, &short, 4, BleuComposite::Geometric).composite,
            100.0
        );
    }

    #[test]
    fn bleu_brevity_penalty() {
        let b = bleu(
            &t("the cat sat"),
            &t("the cat sat on mat"),
            4,
            BleuComposite::Geometric,
        );
        let want = 100.0 * (1.0f64 - 5.0 / 3.0).exp();
        assert_abs_diff_eq!(b.per_n[0], want, epsilon = 1e-12);
        assert_abs_diff_eq!(b.per_n[0], 51.34, epsilon = 5e-3);
    }

    #[test]
    fn bleu_smoothing_keeps_composite_positive() {
        // shares unigrams and bigrams but no 4-gram
        let b = bleu(
            &t("a b c x d e"),
            &t("a b c y d e"),
            4,
            BleuComposite::Geometric,
        );
        assert!(b.composite > 0.0);
        // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = smoothed 1/(3+1)
        let want = 100.0 * (((5.0f64 / 6.0) * 0.6 * 0.25 * 0.25).ln() / 4.0).exp();
        assert_abs_diff_eq!(b.composite, want, epsilon = 1e-10);
    }

    #[test]
    fn bleu_mean_of_orders() {
        let h = t("a b c x d e");
        let r = t("a b c y d e");
        let g = bleu(&h, &r, 4, BleuComposite::Geometric);
        let m = bleu(&h, &r, 4, BleuComposite::MeanOfOrders);
        assert_abs_diff_eq!(
            m.composite,
            g.per_n.iter().sum::<f64>() / 4.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bleu_empty_hypothesis_is_zero() {
        let b = bleu::<String>(&[], &t("a b"), 4, BleuComposite::Geometric);
        assert_eq!(b.composite, 0.0);
        assert_eq!(b.per_n, vec![0.0; 4]);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_n(&t("a b c"), &t("a b c"), 1), 100.0);
        assert_eq!(rouge_n(&t("a b c"), &t("x y z"), 2), 0.0);
        assert_abs_diff_eq!(
            rouge_n(&t("a b c"), &t("a b d"), 1),
            200.0 / 3.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            rouge_l(&t("the cat sat"), &t("the cat sat on the mat")),
            200.0 / 3.0,
            epsilon = 1e-12
        );
        assert_eq!(lcs_len(&t("a b c"), &t("c b a")), 1);
        assert_eq!(rouge_l(&t("x y"), &t("x y")), 100.0);
    }

    #[test]
    fn meteor_cases() {
        assert_abs_diff_eq!(
            meteor_lite(&t("a b c"), &t("a b c")),
            100.0 * (1.0 - 0.5 / 27.0),
            epsilon = 1e-12
        );
        assert_eq!(meteor_lite(&t("a b"), &t("c d")), 0.0);
        assert_eq!(stem("cats"), "cat");
        assert_eq!(stem("glass"), "glass");
        assert_eq!(stem("studies"), "study");
        assert_eq!(meteor_alignment(&t("cats"), &t("cat")), vec![(0, 0)]);
        assert!(meteor_lite(&t("the cats"), &t("the cat")) > 0.0);
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&t("a b"), &t("b a")), 1.0);
        assert_abs_diff_eq!(jaccard(&t("a b"), &t("b c")), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(jaccard(&t("a"), &t("b")), 0.0);
        assert_eq!(jaccard::<String>(&[], &[]), 1.0);
    }

    #[test]
    fn embed_sim_cases() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(embed_sim(&[0, 1], &[0, 1], &e), 1.0, epsilon = 1e-12);
        assert_eq!(embed_sim(&[0], &[1], &e), 0.0);
        // hyp [0], ref [2]: cos = 1/√2 both ways
        assert_abs_diff_eq!(
            embed_sim(&[0], &[2], &e),
            1.0 / 2f64.sqrt(),
            epsilon = 1e-12
        );
        // hyp [0, 1], ref [2]: P = 1/√2, R = 1/√2
        assert_abs_diff_eq!(
            embed_sim(&[0, 1], &[2], &e),
            1.0 / 2f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn report_identity_hits_maxima() {
        let r = MetricReport::score(
            "the patient reports fever .",
            "the patient reports fever .",
            None,
            MetricOptions::default(),
        );
        for v in [r.b1, r.b2, r.b3, r.b4, r.bleu, r.r1, r.r2, r.rl] {
            assert_eq!(v, 100.0);
        }
        assert_eq!(r.jaccard, 1.0);
        // single chunk over five matches
        assert_abs_diff_eq!(r.meteor, 100.0 * (1.0 - 0.5 / 125.0), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn jaccard_ignores_order_bleu_and_rouge_l_do_not(words in proptest::collection::hash_set("[a-h]", 4..8)) {
            let w: Vec<String> = words.into_iter().collect();
            let mut rev = w.clone();
            rev.reverse();
            prop_assert_eq!(jaccard(&w, &rev), 1.0);
            prop_assert!(bleu(&rev, &w, 4, BleuComposite::Geometric).per_n[1] < 100.0);
            prop_assert!(rouge_l(&rev, &w) < 100.0);
        }

        #[test]
        fn scores_stay_in_range(h in proptest::collection::vec("[a-e]", 0..10), r in proptest::collection::vec("[a-e]", 1..10)) {
            let b = bleu(&h, &r, 4, BleuComposite::Geometric);
            for v in b.per_n.iter().chain([&b.composite]) {
                prop_assert!((0.0..=100.0).contains(v));
            }
            for v in [rouge_n(&h, &r, 1), rouge_n(&h, &r, 2), rouge_l(&h, &r), meteor_lite(&h, &r)] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            prop_assert!((0.0..=1.0).contains(&jaccard(&h, &r)));
        }
    }
}
