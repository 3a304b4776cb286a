//! Built-in consistency checks: model and loss gradients against finite
//! differences, and the leakage / retrieval / metric code against
//! brute-force reimplementations.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::leakage::leakage_for_record;
use crate::preftrain::{
    apo_loss, apo_zero_loss, dpo_loss, loss_gradient_check, LogProbBundle, PrefVariant,
};
use crate::retrieval::FlatIndex;
use crate::textmetrics::{bleu_4, exact_match, rouge_l, rouge_n, tokenize};
use crate::tinyseq2seq::{gradient_check, TinySeq2Seq, Vocab, EOS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn random_set(rng: &mut ChaCha8Rng, alphabet: usize, max: usize) -> BTreeSet<String> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| format!("e{}", rng.gen_range(0..alphabet)))
        .collect()
}

/// Counts by direct enumeration, with no set operations.
fn brute_leakage(
    q: &BTreeSet<String>,
    h: &BTreeSet<String>,
    d: &BTreeSet<String>,
) -> (usize, usize, usize) {
    let (mut n, mut m, mut k) = (0, 0, 0);
    for e in q {
        n += 1;
        if h.iter().any(|x| x == e) {
            continue;
        }
        m += 1;
        if d.iter().any(|x| x == e) {
            k += 1;
        }
    }
    (n, m, k)
}

pub fn leakage_oracle(triples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..triples {
        let q = random_set(&mut rng, 12, 6);
        let h = random_set(&mut rng, 12, 6);
        let d = random_set(&mut rng, 12, 8);
        let s = leakage_for_record(&q, &h, &d);
        let (n, m, k) = brute_leakage(&q, &h, &d);
        let lr = if m == 0 { 0.0 } else { k as f64 / m as f64 };
        let pure = if n == 0 { 0.0 } else { k as f64 / n as f64 };
        if (
            s.n_query_entities,
            s.m_not_in_history,
            s.k_solely_from_docans,
        ) != (n, m, k)
            || s.lr != lr
            || s.pure_lr != pure
        {
            bad += 1;
        }
    }
    check(
        "leakage_oracle",
        bad == 0,
        format!("{triples} triples, {bad} mismatches"),
    )
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn retrieval_oracle(n_docs: usize, n_queries: usize, dim: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = (0..n_docs)
        .map(|i| format!("d{:05}", (i * 7919) % 100_000))
        .collect();
    // a few duplicated rows make ties that must break by doc id
    let mut rows: Vec<Vec<f64>> = (0..n_docs)
        .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    for i in (0..n_docs).step_by(10).skip(1) {
        rows[i] = rows[i - 1].clone();
    }
    let index = FlatIndex::from_rows(ids.clone(), dim, &rows)?;
    let mut bad = 0;
    for qi in 0..n_queries {
        let q = if qi % 5 == 0 {
            rows[rng.gen_range(0..n_docs)].clone()
        } else {
            unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let mut all: Vec<(f64, &str)> = (0..n_docs)
            .map(|i| {
                let s: f64 = index
                    .row(i)
                    .iter()
                    .zip(&q)
                    .map(|(&a, b)| f64::from(a) * b)
                    .sum();
                (s, ids[i].as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for k in [1, 5, 10] {
            let got = index.search("q", &q, k)?;
            let same = got.ranked.len() == k.min(n_docs)
                && got
                    .ranked
                    .iter()
                    .zip(&all)
                    .all(|(g, w)| g.doc_id == w.1 && g.score == w.0);
            if !same {
                bad += 1;
            }
        }
    }
    Ok(check(
        "retrieval_oracle",
        bad == 0,
        format!("{n_docs} docs, {n_queries} queries, k in {{1,5,10}}, {bad} mismatches"),
    ))
}

pub fn metric_anchors() -> Check {
    let t = |s: &str| tokenize(s);
    let same = t("the cat sat on the mat");
    let other = t("dogs bark loudly");
    let ok = (rouge_n(&same, &same, 1) - 100.0).abs() < 1e-12
        && (rouge_n(&same, &same, 2) - 100.0).abs() < 1e-12
        && (rouge_l(&same, &same) - 100.0).abs() < 1e-12
        && (bleu_4(&same, &same) - 100.0).abs() < 1e-9
        && rouge_n(&same, &other, 1) == 0.0
        && rouge_l(&same, &other) == 0.0
        && exact_match("The Cat!", "cat") == 1
        && exact_match("a dog", "cat") == 0;
    check(
        "metric_anchors",
        ok,
        "identity / disjoint / EM normalization".into(),
    )
}

pub fn loss_checks(bundles: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut anchors_ok = true;
    for _ in 0..bundles {
        let mut f = || -rng.gen_range(0.01..8.0);
        let b = LogProbBundle {
            d_theta_plus: f(),
            d_theta_minus: f(),
            d_ref_plus: f(),
            d_ref_minus: f(),
            d_anc_plus: f(),
            d_anc_minus: f(),
        };
        for v in [PrefVariant::Dpo, PrefVariant::Apo, PrefVariant::ApoZero] {
            worst = worst.max(loss_gradient_check(&b, v, 0.3, 1e-5));
        }
        let as_ref = LogProbBundle {
            d_ref_plus: b.d_theta_plus,
            d_ref_minus: b.d_theta_minus,
            ..b
        };
        let as_anc = LogProbBundle {
            d_anc_plus: b.d_theta_plus,
            d_anc_minus: b.d_theta_minus,
            ..b
        };
        let anc_is_ref = LogProbBundle {
            d_anc_plus: b.d_ref_plus,
            d_anc_minus: b.d_ref_minus,
            ..b
        };
        anchors_ok &= (dpo_loss(&as_ref, 0.3).loss - std::f64::consts::LN_2).abs() <= 1e-12
            && (apo_zero_loss(&as_anc, 0.3).loss - 1.0).abs() <= 1e-12
            && apo_loss(&anc_is_ref, 0.3).loss == dpo_loss(&anc_is_ref, 0.3).loss;
    }
    vec![
        check(
            "loss_gradients",
            worst <= 1e-8,
            format!("max rel err {worst:.3e} over {bundles} bundles"),
        ),
        check("loss_anchors", anchors_ok, format!("{bundles} bundles")),
    ]
}

/// Finite-difference check of every parameter group of a small random model.
pub fn model_gradients(seed: u64) -> Result<Vec<Check>> {
    let vocab = Vocab::build(["where is it located who owns the farm near lake"], 64);
    let model = TinySeq2Seq::new(vocab, 8, seed);
    let src = [4, 5, 6, 7, 8, 4];
    let tgt = [9, 10, 11, EOS];
    Ok(gradient_check(&model, &src, &tgt, 1e-5, None)?
        .into_iter()
        .map(|g| {
            check(
                &format!("grad_{}", g.group),
                g.max_rel_err <= 1e-4,
                format!("{} coords, max rel err {:.3e}", g.checked, g.max_rel_err),
            )
        })
        .collect())
}

pub fn run(seed: u64) -> Result<SelftestReport> {
    let t0 = Instant::now();
    let mut checks = model_gradients(seed)?;
    checks.extend(loss_checks(100, seed));
    checks.push(leakage_oracle(500, seed));
    checks.push(retrieval_oracle(1000, 100, 16, seed)?);
    checks.push(metric_anchors());
    Ok(SelftestReport {
        checks,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
