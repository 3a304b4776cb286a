//! Text-overlap metrics (ROUGE-1/2/L, BLEU-4, exact match), token-length
//! statistics and mean pairwise cosine matrices.
//!
//! All overlap scores are on the 0–100 scale. ROUGE is reported as F1. BLEU
//! is sentence-level with uniform weights over 1..4-grams; a zero match count
//! for n ≥ 2 is smoothed to `1 / (c_n + 1)`, and the brevity penalty is
//! `exp(1 - r/c)` for candidates shorter than the reference.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased tokens produced by [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Space-joined tokens; re-tokenizing the result is the identity.
    pub fn join(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
    )
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap count and total candidate n-grams.
fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn f1(matched: usize, cand_total: usize, ref_total: usize) -> f64 {
    if matched == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = matched as f64 / cand_total as f64;
    let r = matched as f64 / ref_total as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// ROUGE-N F1 for n ∈ {1, 2}.
pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> f64 {
    assert!(n == 1 || n == 2, "rouge_n supports n = 1 or 2");
    let (matched, cand_total) = clipped_overlap(&candidate.0, &reference.0, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    f1(matched, cand_total, ref_total)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the exact LCS.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    f1(
        lcs_len(&candidate.0, &reference.0),
        candidate.len(),
        reference.len(),
    )
}

/// Smoothed sentence-level BLEU-4.
pub fn bleu_4(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let c = candidate.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matched, total) = clipped_overlap(&candidate.0, &reference.0, n);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let r = reference.len();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_sum.exp()
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 if the normalized texts are identical, else 0.
pub fn exact_match(candidate: &str, reference: &str) -> u8 {
    u8::from(normalize_answer(candidate) == normalize_answer(reference))
}

/// Corpus-averaged generation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu4: f64,
    pub em: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Averages per-sample scores over `(candidate, reference)` pairs.
    pub fn compute<C: AsRef<str> + Sync, R: AsRef<str> + Sync>(pairs: &[(C, R)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("metric report needs at least one sample"));
        }
        let per: Vec<[f64; 5]> = pairs
            .par_iter()
            .map(|(c, r)| {
                let (c, r) = (c.as_ref(), r.as_ref());
                let (ct, rt) = (tokenize(c), tokenize(r));
                [
                    rouge_n(&ct, &rt, 1),
                    rouge_n(&ct, &rt, 2),
                    rouge_l(&ct, &rt),
                    bleu_4(&ct, &rt),
                    100.0 * f64::from(exact_match(c, r)),
                ]
            })
            .collect();
        let n = per.len() as f64;
        let mean = |i: usize| per.iter().map(|s| s[i]).sum::<f64>() / n;
        Ok(Self {
            rouge1: mean(0),
            rouge2: mean(1),
            rouge_l: mean(2),
            bleu4: mean(3),
            em: mean(4),
            n_samples: per.len(),
        })
    }
}

/// Token-count summary for a list of texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

pub fn length_stats<S: AsRef<str>>(texts: &[S]) -> LengthStats {
    let lens: Vec<usize> = texts.iter().map(|t| tokenize(t.as_ref()).len()).collect();
    let n = lens.len();
    LengthStats {
        n,
        mean: if n == 0 {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / n as f64
        },
        min: lens.iter().copied().min().unwrap_or(0),
        max: lens.iter().copied().max().unwrap_or(0),
    }
}

/// Symmetric matrix of mean pairwise cosine similarities between variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CosineMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Entry `(i, j)` is the mean over samples of `cos(v_i[s], v_j[s])`.
pub fn cosine_matrix(variants: &[(String, Vec<Vec<f64>>)]) -> Result<CosineMatrix> {
    let Some((_, first)) = variants.first() else {
        return Ok(CosineMatrix {
            names: vec![],
            values: vec![],
        });
    };
    let n_samples = first.len();
    let dim = first.first().map_or(0, Vec::len);
    let mut normed = Vec::with_capacity(variants.len());
    for (name, vecs) in variants {
        if vecs.len() != n_samples {
            return Err(Error::invalid(format!(
                "variant `{name}` has {} samples, expected {n_samples}",
                vecs.len()
            )));
        }
        let mut rows = Vec::with_capacity(n_samples);
        for (s, v) in vecs.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector(format!("variant `{name}` sample {s}")));
            }
            rows.push(v.iter().map(|x| x / norm).collect::<Vec<_>>());
        }
        normed.push(rows);
    }
    let k = variants.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let mean = if n_samples == 0 {
                0.0
            } else {
                normed[i]
                    .iter()
                    .zip(&normed[j])
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
                    .sum::<f64>()
                    / n_samples as f64
            };
            values[i][j] = mean;
            values[j][i] = mean;
        }
    }
    Ok(CosineMatrix {
        names: variants.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> TokenSeq {
        tokenize(s)
    }

    #[test]
    fn tokenizer_cases() {
        assert_eq!(t("A b, c!").tokens(), ["a", "b", "c"]);
        assert!(t("").is_empty());
        assert_eq!(t("White-Collar 2012").tokens(), ["white", "collar", "2012"]);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_n(&t("a b c"), &t("a b c"), 1) - 100.0).abs() < 1e-12);
        assert_eq!(rouge_n(&t("a b"), &t("c d"), 1), 0.0);
        assert!((rouge_n(&t("a b c"), &t("a c d"), 1) - 200.0 / 3.0).abs() < 1e-9);
        assert!((rouge_l(&t("a b c d"), &t("b d")) - 200.0 / 3.0).abs() < 1e-9);
        assert!((rouge_l(&t("x y"), &t("x y")) - 100.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t(""), &t("b d")), 0.0);
        assert_eq!(rouge_n(&t("a"), &t("a"), 2), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu_4(&t("a b c d"), &t("a b c d")) - 100.0).abs() < 1e-9);
        assert_eq!(bleu_4(&t(""), &t("a b c d")), 0.0);
        // p = 3/4, 2/3, 1/2, 1/(1+1)
        let expected = 100.0 * (0.25f64 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).ln()).exp();
        assert!((bleu_4(&t("a b c d"), &t("a b c e")) - expected).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let short = bleu_4(&t("a b"), &t("a b c d"));
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        assert!((short - expected).abs() < 1e-9, "{short} vs {expected}");
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("The Alpaca!", "alpaca"), 1);
        assert_eq!(exact_match("", ""), 1);
        assert_eq!(exact_match("alpaca", "llama"), 0);
        assert_eq!(exact_match("  an  Apple  pie ", "apple pie."), 1);
    }

    #[test]
    fn report_identical_corpus_scores_100() {
        let pairs = vec![("the quick brown fox jumps", "the quick brown fox jumps"); 3];
        let r = MetricReport::compute(&pairs).unwrap();
        for v in [r.rouge1, r.rouge2, r.rouge_l, r.bleu4, r.em] {
            assert!((v - 100.0).abs() < 1e-9);
        }
        assert!(MetricReport::compute::<&str, &str>(&[]).is_err());
    }

    #[test]
    fn length_stats_mean() {
        let s = length_stats(&["a b c", "d", "e f"]);
        assert_eq!(s.n, 3);
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1, 3));
    }

    #[test]
    fn cosine_basics() {
        let m = cosine_matrix(&[
            ("a".into(), vec![vec![1.0, 0.0], vec![0.0, 2.0]]),
            ("b".into(), vec![vec![0.0, 3.0], vec![1.0, 0.0]]),
        ])
        .unwrap();
        assert!((m.values[0][0] - 1.0).abs() < 1e-9);
        assert!(m.values[0][1].abs() < 1e-12);
        assert_eq!(m.values[0][1], m.values[1][0]);
        assert!(m.to_csv().starts_with("variant,a,b\n"));
    }

    #[test]
    fn cosine_zero_vector_named() {
        let err = cosine_matrix(&[("v".into(), vec![vec![1.0], vec![0.0]])]).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-e]{1,2}", 0..12).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn rouge_symmetric(a in words(), b in words()) {
            let (ta, tb) = (t(&a), t(&b));
            prop_assert!((rouge_n(&ta, &tb, 1) - rouge_n(&tb, &ta, 1)).abs() < 1e-9);
            prop_assert!((rouge_n(&ta, &tb, 2) - rouge_n(&tb, &ta, 2)).abs() < 1e-9);
            prop_assert!((rouge_l(&ta, &tb) - rouge_l(&tb, &ta)).abs() < 1e-9);
        }

        #[test]
        fn scores_in_range(a in words(), b in words()) {
            let (ta, tb) = (t(&a), t(&b));
            for v in [rouge_n(&ta, &tb, 1), rouge_n(&ta, &tb, 2), rouge_l(&ta, &tb), bleu_4(&ta, &tb)] {
                prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
            }
        }

        #[test]
        fn tokenizer_idempotent(s in "\\PC{0,40}") {
            let once = t(&s);
            prop_assert_eq!(t(&once.join()), once);
        }
    }
}
