//! A small GRU encoder–decoder with hand-written backpropagation.
//!
//! The decoder sees the encoder's final state twice: as its initial hidden
//! state and as an extra input at every step. No attention.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::write_atomic;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_VOCAB_CAP: usize = 2000;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_SEED: u64 = 17;
const INIT_SCALE: f64 = 0.08;

/// Whitespace-delimited word vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < SPECIALS.len() || symbols[..4].iter().zip(SPECIALS).any(|(a, b)| a != b)
        {
            return Err(Error::invalid(
                "vocab must start with <pad> <bos> <eos> <unk>",
            ));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad vocab symbol {s:?}")));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocab symbol `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Most frequent words first (ties alphabetical), capped at `cap`
    /// symbols including the four specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                if !SPECIALS.contains(&w) {
                    *freq.entry(w).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().collect();
        words.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let symbols = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .take(cap.max(SPECIALS.len()))
            .collect();
        Self::from_symbols(symbols).expect("built vocab is well-formed")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Unknown words map to UNK. No EOS is appended.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// `encode` plus a trailing EOS, the form `sequence_logprob` expects.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Stops at the first EOS; PAD and BOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Offsets of every parameter group inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    groups: Vec<(&'static str, Range<usize>)>,
}

pub const GROUPS: [&str; 10] = [
    "embedding",
    "enc_w",
    "enc_u",
    "enc_b",
    "dec_w",
    "dec_ctx",
    "dec_u",
    "dec_b",
    "out_w",
    "out_b",
];

impl Layout {
    fn new(v: usize, d: usize) -> Self {
        let sizes = [
            v * d,
            d * 3 * d,
            d * 3 * d,
            3 * d,
            d * 3 * d,
            d * 3 * d,
            d * 3 * d,
            3 * d,
            d * v,
            v,
        ];
        let mut at = 0;
        let groups = GROUPS
            .iter()
            .zip(sizes)
            .map(|(&name, n)| {
                let r = at..at + n;
                at += n;
                (name, r)
            })
            .collect();
        Self { groups }
    }

    pub fn total(&self) -> usize {
        self.groups.last().map_or(0, |g| g.1.end)
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.groups
            .iter()
            .find(|g| g.0 == name)
            .map(|g| g.1.clone())
            .unwrap_or_else(|| panic!("unknown parameter group `{name}`"))
    }

    pub fn groups(&self) -> &[(&'static str, Range<usize>)] {
        &self.groups
    }
}

struct Views<'a> {
    emb: &'a [f64],
    enc_w: &'a [f64],
    enc_u: &'a [f64],
    enc_b: &'a [f64],
    dec_w: &'a [f64],
    dec_ctx: &'a [f64],
    dec_u: &'a [f64],
    dec_b: &'a [f64],
    out_w: &'a [f64],
    out_b: &'a [f64],
}

struct ViewsMut<'a> {
    emb: &'a mut [f64],
    enc_w: &'a mut [f64],
    enc_u: &'a mut [f64],
    enc_b: &'a mut [f64],
    dec_w: &'a mut [f64],
    dec_ctx: &'a mut [f64],
    dec_u: &'a mut [f64],
    dec_b: &'a mut [f64],
    out_w: &'a mut [f64],
    out_b: &'a mut [f64],
}

fn split_mut<'a>(layout: &Layout, buf: &'a mut [f64]) -> ViewsMut<'a> {
    let mut rest = buf;
    let mut parts: Vec<&'a mut [f64]> = Vec::with_capacity(10);
    for (_, r) in &layout.groups {
        let (head, tail) = rest.split_at_mut(r.len());
        parts.push(head);
        rest = tail;
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().unwrap();
    ViewsMut {
        emb: next(),
        enc_w: next(),
        enc_u: next(),
        enc_b: next(),
        dec_w: next(),
        dec_ctx: next(),
        dec_u: next(),
        dec_b: next(),
        out_w: next(),
        out_b: next(),
    }
}

// out += x · M, M is (x.len() × cols) row-major
fn vec_mat_acc(out: &mut [f64], x: &[f64], m: &[f64]) {
    let cols = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
}

// out += M · y, M is (out.len() × y.len()) row-major
fn mat_vec_acc(out: &mut [f64], m: &[f64], y: &[f64]) {
    let cols = y.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    }
}

// dm += x ⊗ y
fn outer_acc(dm: &mut [f64], x: &[f64], y: &[f64]) {
    let cols = y.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dm[i * cols..(i + 1) * cols];
        for (r, &yj) in row.iter_mut().zip(y) {
            *r += xi * yj;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

struct GruCache {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hun: Vec<f64>,
    h: Vec<f64>,
}

/// `a` is the input-side pre-activation (x·W + b [+ ctx·C]) for z, r, n.
fn gru_forward(u: &[f64], a: &[f64], h_prev: &[f64]) -> GruCache {
    let d = h_prev.len();
    let mut hu = vec![0.0; 3 * d];
    vec_mat_acc(&mut hu, h_prev, u);
    let mut z = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut n = vec![0.0; d];
    let mut h = vec![0.0; d];
    for i in 0..d {
        z[i] = sigmoid(a[i] + hu[i]);
        r[i] = sigmoid(a[d + i] + hu[d + i]);
        n[i] = (a[2 * d + i] + r[i] * hu[2 * d + i]).tanh();
        h[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
    }
    GruCache {
        h_prev: h_prev.to_vec(),
        z,
        r,
        n,
        hun: hu[2 * d..].to_vec(),
        h,
    }
}

/// Returns (d pre-activation, d h_prev); accumulates into `du`.
fn gru_backward(u: &[f64], c: &GruCache, dh: &[f64], du: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let d = dh.len();
    let mut da = vec![0.0; 3 * d];
    let mut dhu = vec![0.0; 3 * d];
    let mut dh_prev = vec![0.0; d];
    for i in 0..d {
        let (z, r, n) = (c.z[i], c.r[i], c.n[i]);
        let dn = dh[i] * (1.0 - z);
        let dz = dh[i] * (c.h_prev[i] - n);
        dh_prev[i] = dh[i] * z;
        let dn_pre = dn * (1.0 - n * n);
        let dr_pre = dn_pre * c.hun[i] * r * (1.0 - r);
        let dz_pre = dz * z * (1.0 - z);
        da[i] = dz_pre;
        da[d + i] = dr_pre;
        da[2 * d + i] = dn_pre;
        dhu[i] = dz_pre;
        dhu[d + i] = dr_pre;
        dhu[2 * d + i] = dn_pre * r;
    }
    outer_acc(du, &c.h_prev, &dhu);
    mat_vec_acc(&mut dh_prev, u, &dhu);
    (da, dh_prev)
}

/// Decoding mode for [`TinySeq2Seq::generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    vocab: Vec<String>,
    vocab_hash: String,
    d: usize,
    seed: u64,
    step: u64,
    n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySeq2Seq {
    vocab: Vocab,
    d: usize,
    seed: u64,
    /// Optimizer steps taken so far; carried into checkpoints.
    pub step: u64,
    layout: Layout,
    params: Vec<f64>,
}

impl TinySeq2Seq {
    pub fn new(vocab: Vocab, d: usize, seed: u64) -> Self {
        assert!(d > 0, "hidden size must be positive");
        let layout = Layout::new(vocab.len(), d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..layout.total())
            .map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        Self {
            vocab,
            d,
            seed,
            step: 0,
            layout,
            params,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn group_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.params[r]
    }

    fn views(&self) -> Views<'_> {
        let g = |name| &self.params[self.layout.range(name)];
        Views {
            emb: g("embedding"),
            enc_w: g("enc_w"),
            enc_u: g("enc_u"),
            enc_b: g("enc_b"),
            dec_w: g("dec_w"),
            dec_ctx: g("dec_ctx"),
            dec_u: g("dec_u"),
            dec_b: g("dec_b"),
            out_w: g("out_w"),
            out_b: g("out_b"),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let size = self.vocab.len();
        match ids.iter().find(|&&i| i as usize >= size) {
            Some(&id) => Err(Error::OutOfVocab {
                id: id as usize,
                size,
            }),
            None => Ok(()),
        }
    }

    fn check_target(&self, tgt: &[u32]) -> Result<()> {
        self.check_ids(tgt)?;
        if tgt.last() != Some(&EOS) {
            return Err(Error::invalid("output tokens must end with EOS"));
        }
        Ok(())
    }

    fn embed(&self, v: &Views, id: u32) -> Vec<f64> {
        let d = self.d;
        v.emb[id as usize * d..(id as usize + 1) * d].to_vec()
    }

    fn encode_states(&self, v: &Views, src: &[u32]) -> Vec<GruCache> {
        let d = self.d;
        let mut h = vec![0.0; d];
        let mut caches = Vec::with_capacity(src.len());
        for &id in src {
            let x = self.embed(v, id);
            let mut a = v.enc_b.to_vec();
            vec_mat_acc(&mut a, &x, v.enc_w);
            let c = gru_forward(v.enc_u, &a, &h);
            h = c.h.clone();
            caches.push(c);
        }
        caches
    }

    fn context(&self, caches: &[GruCache]) -> Vec<f64> {
        caches
            .last()
            .map_or_else(|| vec![0.0; self.d], |c| c.h.clone())
    }

    fn ctx_pre(&self, v: &Views, ctx: &[f64]) -> Vec<f64> {
        let mut cp = v.dec_b.to_vec();
        vec_mat_acc(&mut cp, ctx, v.dec_ctx);
        cp
    }

    fn dec_step(&self, v: &Views, ctx_pre: &[f64], prev: u32, h: &[f64]) -> (GruCache, Vec<f64>) {
        let x = self.embed(v, prev);
        let mut a = ctx_pre.to_vec();
        vec_mat_acc(&mut a, &x, v.dec_w);
        let c = gru_forward(v.dec_u, &a, h);
        let mut logits = v.out_b.to_vec();
        vec_mat_acc(&mut logits, &c.h, v.out_w);
        (c, logits)
    }

    /// Teacher-forced next-token distributions, one row per target token.
    pub fn step_distributions(&self, src: &[u32], tgt: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        let v = self.views();
        let ctx = self.context(&self.encode_states(&v, src));
        let cp = self.ctx_pre(&v, &ctx);
        let mut h = ctx;
        let mut prev = BOS;
        let mut rows = Vec::with_capacity(tgt.len());
        for &y in tgt {
            let (c, logits) = self.dec_step(&v, &cp, prev, &h);
            rows.push(log_softmax(&logits).into_iter().map(f64::exp).collect());
            h = c.h;
            prev = y;
        }
        Ok(rows)
    }

    /// `log p(tgt | src)` under teacher forcing; `tgt` must end with EOS.
    pub fn sequence_logprob(&self, src: &[u32], tgt: &[u32]) -> Result<f64> {
        self.check_ids(src)?;
        self.check_target(tgt)?;
        let v = self.views();
        let ctx = self.context(&self.encode_states(&v, src));
        let cp = self.ctx_pre(&v, &ctx);
        let mut h = ctx;
        let mut prev = BOS;
        let mut lp = 0.0;
        for &y in tgt {
            let (c, logits) = self.dec_step(&v, &cp, prev, &h);
            lp += log_softmax(&logits)[y as usize];
            h = c.h;
            prev = y;
        }
        if !lp.is_finite() {
            return Err(Error::invalid("sequence log-probability is not finite"));
        }
        Ok(lp)
    }

    /// Log-probability and the gradient of `coeff · logp` w.r.t. every
    /// parameter, laid out like [`params`](Self::params).
    pub fn logprob_and_grad(
        &self,
        src: &[u32],
        tgt: &[u32],
        coeff: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let lp = self.accumulate_grad(src, tgt, coeff, &mut grad)?;
        self.check_grad(&grad)?;
        Ok((lp, grad))
    }

    fn accumulate_grad(
        &self,
        src: &[u32],
        tgt: &[u32],
        coeff: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_ids(src)?;
        self.check_target(tgt)?;
        let d = self.d;
        let v = self.views();
        let g = split_mut(&self.layout, grad);

        let enc = self.encode_states(&v, src);
        let ctx = self.context(&enc);
        let cp = self.ctx_pre(&v, &ctx);
        let mut h = ctx.clone();
        let mut prev = BOS;
        let mut lp = 0.0;
        let mut steps = Vec::with_capacity(tgt.len());
        for &y in tgt {
            let (c, logits) = self.dec_step(&v, &cp, prev, &h);
            let ls = log_softmax(&logits);
            lp += ls[y as usize];
            let mut dlogits: Vec<f64> = ls.iter().map(|&l| -coeff * l.exp()).collect();
            dlogits[y as usize] += coeff;
            h = c.h.clone();
            steps.push((prev, c, dlogits));
            prev = y;
        }

        let mut dh_next = vec![0.0; d];
        let mut dctx_pre = vec![0.0; 3 * d];
        for (prev, c, dlogits) in steps.iter().rev() {
            outer_acc(g.out_w, &c.h, dlogits);
            g.out_b.iter_mut().zip(dlogits).for_each(|(a, b)| *a += b);
            let mut dh = dh_next;
            mat_vec_acc(&mut dh, v.out_w, dlogits);
            let (da, dh_prev) = gru_backward(v.dec_u, c, &dh, g.dec_u);
            let x = self.embed(&v, *prev);
            outer_acc(g.dec_w, &x, &da);
            let row = *prev as usize * d;
            mat_vec_acc(&mut g.emb[row..row + d], v.dec_w, &da);
            dctx_pre.iter_mut().zip(&da).for_each(|(a, b)| *a += b);
            dh_next = dh_prev;
        }
        g.dec_b.iter_mut().zip(&dctx_pre).for_each(|(a, b)| *a += b);
        outer_acc(g.dec_ctx, &ctx, &dctx_pre);
        let mut dctx = dh_next;
        mat_vec_acc(&mut dctx, v.dec_ctx, &dctx_pre);

        let mut dh = dctx;
        for (c, &id) in enc.iter().zip(src).rev() {
            let (da, dh_prev) = gru_backward(v.enc_u, c, &dh, g.enc_u);
            let x = self.embed(&v, id);
            outer_acc(g.enc_w, &x, &da);
            g.enc_b.iter_mut().zip(&da).for_each(|(a, b)| *a += b);
            let row = id as usize * d;
            mat_vec_acc(&mut g.emb[row..row + d], v.enc_w, &da);
            dh = dh_prev;
        }
        if !lp.is_finite() {
            return Err(Error::invalid("sequence log-probability is not finite"));
        }
        Ok(lp)
    }

    fn check_grad(&self, grad: &[f64]) -> Result<()> {
        for (name, r) in self.layout.groups() {
            if grad[r.clone()].iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }

    /// Gradient of `Σ coeff_i · logp_i` over a batch. Examples run in
    /// parallel; their gradients are summed in input order so the result
    /// does not depend on thread scheduling.
    pub fn batch_grad(&self, items: &[(&[u32], &[u32], f64)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = items
            .par_iter()
            .map(|(s, t, c)| {
                let mut g = vec![0.0; self.params.len()];
                let lp = self.accumulate_grad(s, t, *c, &mut g)?;
                Ok((lp, g))
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; self.params.len()];
        let mut lps = Vec::with_capacity(parts.len());
        for (lp, g) in parts {
            lps.push(lp);
            total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        self.check_grad(&total)?;
        Ok((lps, total))
    }

    /// Decodes until EOS or `max_len` tokens; the EOS is not returned.
    pub fn generate(&self, src: &[u32], max_len: usize, mode: Decoding) -> Result<Vec<u32>> {
        self.check_ids(src)?;
        let v = self.views();
        let ctx = self.context(&self.encode_states(&v, src));
        let cp = self.ctx_pre(&v, &ctx);
        let mut rng = match mode {
            Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut h = ctx;
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (c, logits) = self.dec_step(&v, &cp, prev, &h);
            let next = match (mode, rng.as_mut()) {
                (Decoding::Sample { temperature, .. }, Some(rng)) => {
                    let t = temperature.max(1e-6);
                    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
                    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick as u32
                }
                _ => {
                    let mut best = 0;
                    for (i, &l) in logits.iter().enumerate() {
                        if l > logits[best] {
                            best = i;
                        }
                    }
                    best as u32
                }
            };
            if next == EOS {
                break;
            }
            out.push(next);
            h = c.h;
            prev = next;
        }
        Ok(out)
    }

    /// Writes `params.bin` (u64 LE count, then f64 LE values) and
    /// `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(8 + self.params.len() * 8);
        bytes.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        write_atomic(dir.join("params.bin"), &bytes)?;
        let meta = CheckpointMeta {
            vocab: self.vocab.symbols.clone(),
            vocab_hash: self.vocab.hash(),
            d: self.d,
            seed: self.seed,
            step: self.step,
            n_params: self.params.len(),
        };
        write_atomic(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let vocab = Vocab::from_symbols(meta.vocab)?;
        if vocab.hash() != meta.vocab_hash {
            return Err(Error::Checkpoint("vocab hash mismatch".into()));
        }
        let layout = Layout::new(vocab.len(), meta.d);
        let bin = dir.join("params.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() < 8 {
            return Err(Error::Checkpoint("truncated parameter blob".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if n != layout.total() || n != meta.n_params || bytes.len() != 8 + 8 * n {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, blob says {n}",
                layout.total()
            )));
        }
        let params: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            vocab,
            d: meta.d,
            seed: meta.seed,
            step: meta.step,
            layout,
            params,
        })
    }
}

/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer shape mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient shape mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            "constant" => Ok(Self::Constant),
            other => Err(Error::invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Linear warmup from 0, then cosine / linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn with_ratio(base: f64, warmup_ratio: f64, total_steps: u64, kind: ScheduleKind) -> Self {
        Self {
            base,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as u64,
            total_steps,
            kind,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Linear => self.base * (1.0 - progress),
            ScheduleKind::Cosine => {
                self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Worst central-difference disagreement for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients of `logp(tgt | src)` with central
/// differences. At most `per_group` evenly spaced coordinates are probed
/// in each group (all of them when `None`). Relative error is
/// `|a − n| / max(|a| + |n|, 1e-5)`; the floor keeps coordinates whose
/// true gradient is ~0 from reporting round-off as error.
pub fn gradient_check(
    model: &TinySeq2Seq,
    src: &[u32],
    tgt: &[u32],
    eps: f64,
    per_group: Option<usize>,
) -> Result<Vec<GroupCheck>> {
    let (_, grad) = model.logprob_and_grad(src, tgt, 1.0)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, range) in model.layout().groups().to_vec() {
        let n = range.len();
        let stride = per_group.map_or(1, |k| (n / k.max(1)).max(1));
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (range.start..range.end).step_by(stride) {
            let orig = probe.params[i];
            probe.params[i] = orig + eps;
            let up = probe.sequence_logprob(src, tgt)?;
            probe.params[i] = orig - eps;
            let down = probe.sequence_logprob(src, tgt)?;
            probe.params[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let err = (grad[i] - num).abs() / (grad[i].abs() + num.abs()).max(1e-5);
            worst = worst.max(err);
            checked += 1;
        }
        out.push(GroupCheck {
            group: name.to_string(),
            checked,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["where is alpaca farm located", "who owns it ?"], 100)
    }

    fn small() -> TinySeq2Seq {
        TinySeq2Seq::new(vocab(), 5, 3)
    }

    #[test]
    fn vocab_round_trip_and_specials() {
        let v = vocab();
        assert_eq!(v.symbol(PAD), Some("<pad>"));
        assert_eq!(v.id("<eos>"), Some(EOS));
        let text = "who owns alpaca farm";
        assert_eq!(v.decode(&v.encode(text)), text);
        assert_eq!(v.encode("zebra"), vec![UNK]);
        assert_eq!(
            v.decode(&[BOS, v.id("who").unwrap(), EOS, v.id("it").unwrap()]),
            "who"
        );
        assert!(Vocab::from_symbols(vec!["a".into()]).is_err());
        let mut dup: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        dup.extend(["x".into(), "x".into()]);
        assert!(Vocab::from_symbols(dup).is_err());
        let capped = Vocab::build(["a b c d e f"], 6);
        assert_eq!(capped.len(), 6);
    }

    #[test]
    fn uniform_model_logprob() {
        let mut m = small();
        m.group_mut("out_w").fill(0.0);
        m.group_mut("out_b").fill(0.0);
        let v = m.vocab().len() as f64;
        let tgt = m.vocab().encode_target("who owns it");
        let lp = m.sequence_logprob(&[4, 5], &tgt).unwrap();
        assert!((lp - 4.0 * (1.0 / v).ln()).abs() < 1e-12);
    }

    #[test]
    fn forced_model_logprob_is_zero() {
        let mut m = small();
        m.group_mut("out_w").fill(0.0);
        let b = m.group_mut("out_b");
        b.fill(0.0);
        b[EOS as usize] = 1000.0;
        assert_eq!(m.sequence_logprob(&[4], &[EOS]).unwrap(), 0.0);
        assert!(m.generate(&[4], 10, Decoding::Greedy).unwrap().is_empty());
    }

    #[test]
    fn errors_on_bad_ids() {
        let m = small();
        let size = m.vocab().len();
        assert!(matches!(
            m.sequence_logprob(&[size as u32], &[EOS]),
            Err(Error::OutOfVocab { .. })
        ));
        assert!(m.sequence_logprob(&[4], &[4]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = small();
        for row in m.step_distributions(&[4, 5, 6], &[7, 8, EOS]).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let lp = m.sequence_logprob(&[4, 5, 6], &[7, 8, EOS]).unwrap();
        assert!(lp.exp() > 0.0 && lp.exp() <= 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = small();
        for g in gradient_check(&m, &[4, 5, 6, 4], &[7, 8, EOS], 1e-5, None).unwrap() {
            assert!(g.max_rel_err <= 1e-4, "{g:?}");
            assert!(g.checked > 0);
        }
    }

    #[test]
    fn gradient_is_linear_in_coeff() {
        let m = small();
        let (_, g1) = m.logprob_and_grad(&[4, 5], &[6, EOS], 1.0).unwrap();
        let (_, g2) = m.logprob_and_grad(&[4, 5], &[6, EOS], 2.0).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // unused vocabulary rows get no gradient
        let emb = m.layout().range("embedding");
        let d = m.hidden();
        let row = 9 * d;
        assert!(g1[emb.start + row..emb.start + row + d]
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn batch_grad_is_sum_of_singles() {
        let m = small();
        let a: (&[u32], &[u32], f64) = (&[4, 5], &[6, EOS], 0.5);
        let b: (&[u32], &[u32], f64) = (&[7], &[8, 9, EOS], -1.5);
        let (lps, g) = m.batch_grad(&[a, b]).unwrap();
        let (la, ga) = m.logprob_and_grad(a.0, a.1, a.2).unwrap();
        let (lb, gb) = m.logprob_and_grad(b.0, b.1, b.2).unwrap();
        assert_eq!(lps, vec![la, lb]);
        for i in 0..g.len() {
            assert!((g[i] - (ga[i] + gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let m = small();
        let g1 = m.generate(&[4, 5], 8, Decoding::Greedy).unwrap();
        assert_eq!(g1, m.generate(&[4, 5], 8, Decoding::Greedy).unwrap());
        assert!(g1.len() <= 8);
        let mode = Decoding::Sample {
            temperature: 1.0,
            seed: 11,
        };
        assert_eq!(
            m.generate(&[4, 5], 8, mode).unwrap(),
            m.generate(&[4, 5], 8, mode).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = small();
        m.step = 42;
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = TinySeq2Seq::load(dir.path()).unwrap();
        assert_eq!(m, back);
        fs::write(dir.path().join("params.bin"), [0u8; 12]).unwrap();
        assert!(TinySeq2Seq::load(dir.path()).is_err());
    }

    #[test]
    fn adam_hand_computed() {
        // Step 1: m = 0.1·g, v = 0.001·g², m̂ = g, v̂ = g² → Δ = lr·g/(|g| + eps).
        let mut p = vec![1.0];
        let mut opt = Adam::new(1);
        opt.step(&mut p, &[2.0], 0.1);
        let want1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - want1).abs() < 1e-15);
        // Step 2 with g = -1: m = 0.9·0.2 + 0.1·(−1) = 0.08, v = 0.999·0.004 + 0.001 = 0.004996
        opt.step(&mut p, &[-1.0], 0.1);
        let mh = 0.08 / (1.0 - 0.81);
        let vh: f64 = 0.004996 / (1.0 - 0.999f64 * 0.999);
        let want2 = want1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - want2).abs() < 1e-12);

        let mut q = vec![0.5, -0.25];
        Adam::new(2).step(&mut q, &[0.0, 0.0], 1.0);
        assert_eq!(q, vec![0.5, -0.25]);
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::with_ratio(1.0, 0.3, 10, ScheduleKind::Cosine);
        assert_eq!(s.warmup_steps, 3);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.lr(3), 1.0);
        assert!(s.lr(10).abs() < 1e-15);
        let l = LrSchedule::with_ratio(2.0, 0.1, 10, ScheduleKind::Linear);
        assert!((l.lr(1) - 2.0).abs() < 1e-15);
        assert!((l.lr(5) - 2.0 * 5.0 / 9.0).abs() < 1e-12);
        assert_eq!(l.lr(10), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
