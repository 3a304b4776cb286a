//! Independent metric oracle: character scanner, string-keyed n-gram maps,
//! full LCS table.

#![allow(dead_code)]

use std::collections::BTreeMap;

use serde::Deserialize;

pub fn toks(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn grams(t: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    let mut i = 0;
    while i + n <= t.len() {
        *m.entry(t[i..i + n].join("\u{1}")).or_insert(0) += 1;
        i += 1;
    }
    m
}

pub fn matches(c: &[String], r: &[String], n: usize) -> usize {
    let rg = grams(r, n);
    grams(c, n)
        .iter()
        .map(|(g, k)| (*k).min(*rg.get(g).unwrap_or(&0)))
        .sum()
}

pub fn count(t: &[String], n: usize) -> usize {
    if t.len() >= n {
        t.len() - n + 1
    } else {
        0
    }
}

// F1 = 2m / (|c| + |r|)
pub fn f(m: usize, c: usize, r: usize) -> f64 {
    if m == 0 {
        0.0
    } else {
        100.0 * 2.0 * m as f64 / (c + r) as f64
    }
}

pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                t[i + 1][j + 1] + 1
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t[0][0]
}

pub fn oracle_bleu(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let m = matches(c, r, n);
        let total = count(c, n);
        let p = if m > 0 {
            m as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        prod *= p;
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * prod.powf(0.25)
}

#[derive(Deserialize)]
pub struct Pair {
    pub candidate: String,
    pub reference: String,
}

#[derive(Deserialize)]
pub struct EmCase {
    pub candidate: String,
    pub reference: String,
    pub em: u8,
}

pub fn load<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// [rouge1, rouge2, rougeL, bleu4] on the 0-100 scale.
pub fn oracle_scores(candidate: &str, reference: &str) -> [f64; 4] {
    let (c, r) = (toks(candidate), toks(reference));
    [
        f(matches(&c, &r, 1), count(&c, 1), count(&r, 1)),
        f(matches(&c, &r, 2), count(&c, 2), count(&r, 2)),
        f(lcs(&c, &r), c.len(), r.len()),
        oracle_bleu(&c, &r),
    ]
}
