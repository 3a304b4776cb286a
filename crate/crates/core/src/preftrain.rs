//! Supervised fine-tuning, feedback-scored preference pairs, and the
//! DPO / APO / APO-zero objectives.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::QueryRecord;
use crate::error::{Error, Result};
use crate::pipeline::{extractive_generate, serialize_input, serialize_target, RagEnv};
use crate::textmetrics::{rouge_l, tokenize};
use crate::tinyseq2seq::{clip_grad_norm, Adam, Decoding, LrSchedule, ScheduleKind, TinySeq2Seq};

/// One supervised example; `tgt` ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl SftExample {
    pub fn from_text(model: &TinySeq2Seq, input: &str, target: &str) -> Self {
        Self {
            src: model.vocab().encode(input),
            tgt: model.vocab().encode_target(target),
        }
    }

    /// Input = serialized history + query, target = the chosen rewrite.
    pub fn from_record(model: &TinySeq2Seq, record: &QueryRecord, rewrite: &str) -> Self {
        Self::from_text(model, &serialize_input(record), &serialize_target(rewrite))
    }
}

/// Mean over examples of the summed token negative log-likelihood, and
/// its gradient.
pub fn sft_loss(model: &TinySeq2Seq, batch: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty SFT batch"));
    }
    let c = -1.0 / batch.len() as f64;
    let items: Vec<(&[u32], &[u32], f64)> =
        batch.iter().map(|e| (&e.src[..], &e.tgt[..], c)).collect();
    let (lps, grad) = model.batch_grad(&items)?;
    Ok((-lps.iter().sum::<f64>() / batch.len() as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: ScheduleKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_ratio: 0.3,
            schedule: ScheduleKind::Cosine,
            epochs: 2,
            batch_size: 1,
            grad_clip: Some(1.0),
            seed: 17,
        }
    }
}

/// Trains in place. `on_epoch(epoch, model, mean_loss)` runs after each
/// epoch; returning `false` stops early. Returns per-epoch mean loss.
pub fn train_sft(
    model: &mut TinySeq2Seq,
    data: &[SftExample],
    cfg: &SftConfig,
    mut on_epoch: impl FnMut(usize, &TinySeq2Seq, f64) -> bool,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("no SFT examples"));
    }
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs);
    let sched = LrSchedule::with_ratio(
        cfg.lr,
        cfg.warmup_ratio,
        (steps_per_epoch * cfg.epochs) as u64,
        cfg.schedule,
    );
    let mut opt = Adam::new(model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, mut grad) = sft_loss(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite SFT loss at step {step}"
                )));
            }
            total += loss * batch.len() as f64;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            opt.step(model.params_mut(), &grad, sched.lr(step));
            step += 1;
            model.step += 1;
        }
        let mean = total / data.len() as f64;
        info!("sft epoch {} mean loss {mean:.4}", epoch + 1);
        history.push(mean);
        if !on_epoch(epoch + 1, model, mean) {
            break;
        }
    }
    Ok(history)
}

/// Greedy-decoding sequence exact match (token level) as a fraction.
pub fn sequence_accuracy(model: &TinySeq2Seq, data: &[SftExample], max_len: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = data
        .par_iter()
        .map(|e| {
            let out = model.generate(&e.src, max_len, Decoding::Greedy)?;
            Ok(usize::from(out[..] == e.tgt[..e.tgt.len() - 1]))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub input: String,
    pub chosen: String,
    pub rejected: String,
    pub score_chosen: f64,
    pub score_rejected: f64,
}

impl PreferencePair {
    pub fn margin(&self) -> f64 {
        self.score_chosen - self.score_rejected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub candidates: usize,
    pub temperature: f64,
    pub w_retrieval: f64,
    pub w_generation: f64,
    pub threshold: f64,
    pub k: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            candidates: 8,
            temperature: 1.0,
            w_retrieval: 0.5,
            w_generation: 0.5,
            threshold: 0.05,
            k: 5,
            max_len: 32,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSummary {
    pub records: usize,
    pub pairs: usize,
    pub skipped_identical: usize,
    pub skipped_margin: usize,
    pub skipped_no_gold: usize,
}

/// Feedback score of one candidate rewrite: weighted reciprocal rank of
/// the positive document (0 beyond k) plus ROUGE-L of the extractive
/// answer against the gold answer, scaled to [0, 1].
pub fn score_candidate(
    env: &RagEnv<'_>,
    record: &QueryRecord,
    rewrite: &str,
    cfg: &PairConfig,
) -> f64 {
    let Some(gold) = record.pos_doc_id.as_deref() else {
        return 0.0;
    };
    let hits = match env.retrieve(&record.record_id, rewrite, cfg.k) {
        Ok(h) => h,
        Err(_) => return 0.0,
    };
    let rr = hits
        .iter()
        .take(cfg.k)
        .position(|h| h.doc_id == gold)
        .map_or(0.0, |p| 1.0 / (p as f64 + 1.0));
    let docs = env.docs(&hits).unwrap_or_default();
    let answer = extractive_generate(rewrite, &docs);
    let rl = rouge_l(&tokenize(&answer), &tokenize(&record.gold_answer));
    cfg.w_retrieval * rr + cfg.w_generation * rl / 100.0
}

/// Picks (chosen, rejected) from scored candidates: argmax / argmin of the
/// score, ties toward the shorter candidate, then the earlier one.
/// `None` when every candidate is identical or the margin is below the
/// threshold; the flag says which.
pub fn select_pair(
    cands: &[(Vec<u32>, f64)],
    threshold: f64,
) -> std::result::Result<(usize, usize), bool> {
    if cands.is_empty() || cands.iter().all(|c| c.0 == cands[0].0) {
        return Err(true);
    }
    let better = |a: usize, b: usize, want_high: bool| -> bool {
        let (sa, sb) = (cands[a].1, cands[b].1);
        if sa != sb {
            return if want_high { sa > sb } else { sa < sb };
        }
        cands[a].0.len() < cands[b].0.len()
    };
    let mut hi = 0;
    for i in 1..cands.len() {
        if better(i, hi, true) {
            hi = i;
        }
    }
    // the rejected candidate must differ from the chosen one
    let mut lo: Option<usize> = None;
    for i in (0..cands.len()).filter(|&i| cands[i].0 != cands[hi].0) {
        if lo.is_none_or(|l| better(i, l, false)) {
            lo = Some(i);
        }
    }
    let lo = lo.expect("non-identical candidates");
    if cands[hi].1 - cands[lo].1 < threshold {
        return Err(false);
    }
    Ok((hi, lo))
}

fn candidate_seed(base: u64, record: usize, i: usize, per: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((record * per + i) as u64)
}

/// Samples candidates from the SFT model, scores them with retrieval and
/// generation feedback, and keeps pairs whose margin reaches the threshold.
pub fn build_preference_pairs(
    records: &[QueryRecord],
    model: &TinySeq2Seq,
    env: &RagEnv<'_>,
    cfg: &PairConfig,
) -> Result<(Vec<PreferencePair>, PairSummary)> {
    if cfg.candidates < 2 {
        return Err(Error::invalid("need at least two candidates per record"));
    }
    let per_record: Vec<std::result::Result<PreferencePair, u8>> = records
        .par_iter()
        .enumerate()
        .map(|(ri, record)| {
            if record.pos_doc_id.is_none() {
                return Ok(Err(2));
            }
            let input = serialize_input(record);
            let src = model.vocab().encode(&input);
            let mut cands = Vec::with_capacity(cfg.candidates);
            for i in 0..cfg.candidates {
                let mode = Decoding::Sample {
                    temperature: cfg.temperature,
                    seed: candidate_seed(cfg.seed, ri, i, cfg.candidates),
                };
                let toks = model.generate(&src, cfg.max_len, mode)?;
                let text = model.vocab().decode(&toks);
                let score = score_candidate(env, record, &text, cfg);
                cands.push((toks, score));
            }
            Ok(match select_pair(&cands, cfg.threshold) {
                Ok((hi, lo)) => Ok(PreferencePair {
                    input,
                    chosen: model.vocab().decode(&cands[hi].0),
                    rejected: model.vocab().decode(&cands[lo].0),
                    score_chosen: cands[hi].1,
                    score_rejected: cands[lo].1,
                }),
                Err(true) => Err(0),
                Err(false) => Err(1),
            })
        })
        .collect::<Result<_>>()?;
    let mut summary = PairSummary {
        records: records.len(),
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for r in per_record {
        match r {
            Ok(p) => pairs.push(p),
            Err(0) => summary.skipped_identical += 1,
            Err(1) => summary.skipped_margin += 1,
            Err(_) => summary.skipped_no_gold += 1,
        }
    }
    summary.pairs = pairs.len();
    if summary.skipped_no_gold > 0 {
        warn!(
            "{} records without a positive document were skipped",
            summary.skipped_no_gold
        );
    }
    Ok((pairs, summary))
}

/// Sequence log-probabilities for one pair under the policy, the
/// reference and the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LogProbBundle {
    pub d_theta_plus: f64,
    pub d_theta_minus: f64,
    pub d_ref_plus: f64,
    pub d_ref_minus: f64,
    pub d_anc_plus: f64,
    pub d_anc_minus: f64,
}

impl LogProbBundle {
    pub fn validate(&self) -> Result<()> {
        let v = [
            self.d_theta_plus,
            self.d_theta_minus,
            self.d_ref_plus,
            self.d_ref_minus,
            self.d_anc_plus,
            self.d_anc_minus,
        ];
        if v.iter().all(|x| x.is_finite() && *x <= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("log-probabilities must be finite and ≤ 0"))
        }
    }

    pub fn margin(&self) -> f64 {
        self.d_theta_plus - self.d_theta_minus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrefVariant {
    #[default]
    Dpo,
    Apo,
    ApoZero,
}

impl std::str::FromStr for PrefVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(Self::Dpo),
            "apo" => Ok(Self::Apo),
            "apo_zero" | "apo-zero" => Ok(Self::ApoZero),
            other => Err(Error::invalid(format!("unknown preference loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefLossConfig {
    pub beta: f64,
    pub variant: PrefVariant,
    pub pair_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: ScheduleKind,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for PrefLossConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            variant: PrefVariant::Dpo,
            pair_threshold: 0.05,
            epochs: 4,
            batch_size: 2,
            grad_accum: 8,
            lr: 1e-5,
            warmup_ratio: 0.1,
            schedule: ScheduleKind::Linear,
            grad_clip: Some(1.0),
            seed: 17,
        }
    }
}

/// Loss value and its partial derivatives w.r.t. every bundle field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: LogProbBundle,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// −log σ(u)
fn neg_log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

fn pairwise(beta: f64, tp: f64, tm: f64, bp: f64, bm: f64) -> (f64, f64) {
    let u = beta * ((tp - tm) - (bp - bm));
    (neg_log_sigmoid(u), beta * sigmoid(-u))
}

/// `−log σ(β((Δθ+ − Δθ−) − (Δref+ − Δref−)))`.
pub fn dpo_loss(b: &LogProbBundle, beta: f64) -> LossGrad {
    let (loss, g) = pairwise(
        beta,
        b.d_theta_plus,
        b.d_theta_minus,
        b.d_ref_plus,
        b.d_ref_minus,
    );
    LossGrad {
        loss,
        grad: LogProbBundle {
            d_theta_plus: -g,
            d_theta_minus: g,
            d_ref_plus: g,
            d_ref_minus: -g,
            ..Default::default()
        },
    }
}

/// DPO with the anchor in place of the reference.
pub fn apo_loss(b: &LogProbBundle, beta: f64) -> LossGrad {
    let (loss, g) = pairwise(
        beta,
        b.d_theta_plus,
        b.d_theta_minus,
        b.d_anc_plus,
        b.d_anc_minus,
    );
    LossGrad {
        loss,
        grad: LogProbBundle {
            d_theta_plus: -g,
            d_theta_minus: g,
            d_anc_plus: g,
            d_anc_minus: -g,
            ..Default::default()
        },
    }
}

/// `(1 − σ(β·(Δθ+ − Δanc+))) + σ(β·(Δθ− − Δanc−))`, anchor = initial policy.
pub fn apo_zero_loss(b: &LogProbBundle, beta: f64) -> LossGrad {
    let sc = sigmoid(beta * (b.d_theta_plus - b.d_anc_plus));
    let sr = sigmoid(beta * (b.d_theta_minus - b.d_anc_minus));
    let gc = beta * sc * (1.0 - sc);
    let gr = beta * sr * (1.0 - sr);
    LossGrad {
        loss: (1.0 - sc) + sr,
        grad: LogProbBundle {
            d_theta_plus: -gc,
            d_theta_minus: gr,
            d_anc_plus: gc,
            d_anc_minus: -gr,
            ..Default::default()
        },
    }
}

pub fn pref_loss(b: &LogProbBundle, variant: PrefVariant, beta: f64) -> LossGrad {
    match variant {
        PrefVariant::Dpo => dpo_loss(b, beta),
        PrefVariant::Apo => apo_loss(b, beta),
        PrefVariant::ApoZero => apo_zero_loss(b, beta),
    }
}

fn fields(b: &LogProbBundle) -> [f64; 6] {
    [
        b.d_theta_plus,
        b.d_theta_minus,
        b.d_ref_plus,
        b.d_ref_minus,
        b.d_anc_plus,
        b.d_anc_minus,
    ]
}

fn from_fields(f: [f64; 6]) -> LogProbBundle {
    LogProbBundle {
        d_theta_plus: f[0],
        d_theta_minus: f[1],
        d_ref_plus: f[2],
        d_ref_minus: f[3],
        d_anc_plus: f[4],
        d_anc_minus: f[5],
    }
}

/// Largest relative disagreement between the analytic gradient and
/// central differences over all six bundle fields, using
/// `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn loss_gradient_check(b: &LogProbBundle, variant: PrefVariant, beta: f64, eps: f64) -> f64 {
    let analytic = fields(&pref_loss(b, variant, beta).grad);
    let base = fields(b);
    (0..6)
        .map(|i| {
            let (mut up, mut down) = (base, base);
            up[i] += eps;
            down[i] -= eps;
            let num = (pref_loss(&from_fields(up), variant, beta).loss
                - pref_loss(&from_fields(down), variant, beta).loss)
                / (2.0 * eps);
            (analytic[i] - num).abs() / (analytic[i].abs() + num.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Pair statistics under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean_margin: f64,
    pub frac_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
    pub frac_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefHistory {
    pub initial: MarginStats,
    pub epochs: Vec<PrefEpoch>,
}

/// Result of preference training. On a non-finite loss or gradient the
/// run stops, `model` is the last good state and `aborted` says why.
#[derive(Debug, Clone)]
pub struct PrefOutcome {
    pub model: TinySeq2Seq,
    pub history: PrefHistory,
    pub aborted: Option<String>,
}

struct EncodedPair {
    src: Vec<u32>,
    plus: Vec<u32>,
    minus: Vec<u32>,
    base_plus: f64,
    base_minus: f64,
}

fn encode_pairs(
    model: &TinySeq2Seq,
    pairs: &[PreferencePair],
) -> Vec<(Vec<u32>, Vec<u32>, Vec<u32>)> {
    pairs
        .iter()
        .map(|p| {
            (
                model.vocab().encode(&p.input),
                model.vocab().encode_target(&p.chosen),
                model.vocab().encode_target(&p.rejected),
            )
        })
        .collect()
}

fn policy_logps(model: &TinySeq2Seq, pairs: &[EncodedPair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok((
                model.sequence_logprob(&p.src, &p.plus)?,
                model.sequence_logprob(&p.src, &p.minus)?,
            ))
        })
        .collect()
}

fn margin_stats(lps: &[(f64, f64)]) -> MarginStats {
    let n = lps.len().max(1) as f64;
    MarginStats {
        mean_margin: lps.iter().map(|(p, m)| p - m).sum::<f64>() / n,
        frac_positive: lps.iter().filter(|(p, m)| p > m).count() as f64 / n,
    }
}

/// Preference optimisation starting from `sft`. The reference (DPO) and
/// anchor (APO / APO-zero) default to a frozen copy of `sft`.
pub fn train_preference(
    sft: &TinySeq2Seq,
    pairs: &[PreferencePair],
    cfg: &PrefLossConfig,
    anchor: Option<&TinySeq2Seq>,
) -> Result<PrefOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs"));
    }
    if cfg.beta.is_nan() || cfg.beta <= 0.0 {
        return Err(Error::invalid("beta must be positive"));
    }
    let baseline = anchor.unwrap_or(sft);
    let encoded: Vec<EncodedPair> = encode_pairs(sft, pairs)
        .into_par_iter()
        .map(|(src, plus, minus)| {
            Ok(EncodedPair {
                base_plus: baseline.sequence_logprob(&src, &plus)?,
                base_minus: baseline.sequence_logprob(&src, &minus)?,
                src,
                plus,
                minus,
            })
        })
        .collect::<Result<_>>()?;

    let mut model = sft.clone();
    let initial = margin_stats(&policy_logps(&model, &encoded)?);
    let update = cfg.batch_size.max(1) * cfg.grad_accum.max(1);
    let steps_per_epoch = encoded.len().div_ceil(update);
    let sched = LrSchedule::with_ratio(
        cfg.lr,
        cfg.warmup_ratio,
        (steps_per_epoch * cfg.epochs) as u64,
        cfg.schedule,
    );
    let mut opt = Adam::new(model.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(update) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &encoded[i]).collect();
            let attempt = (|| -> Result<(f64, Vec<f64>)> {
                let lps: Vec<(f64, f64)> = batch
                    .par_iter()
                    .map(|p| {
                        Ok((
                            model.sequence_logprob(&p.src, &p.plus)?,
                            model.sequence_logprob(&p.src, &p.minus)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let scale = 1.0 / batch.len() as f64;
                let mut loss = 0.0;
                let mut items: Vec<(&[u32], &[u32], f64)> = Vec::with_capacity(2 * batch.len());
                for (p, &(tp, tm)) in batch.iter().zip(&lps) {
                    let bundle = LogProbBundle {
                        d_theta_plus: tp,
                        d_theta_minus: tm,
                        d_ref_plus: p.base_plus,
                        d_ref_minus: p.base_minus,
                        d_anc_plus: p.base_plus,
                        d_anc_minus: p.base_minus,
                    };
                    let lg = pref_loss(&bundle, cfg.variant, cfg.beta);
                    loss += lg.loss;
                    items.push((&p.src, &p.plus, lg.grad.d_theta_plus * scale));
                    items.push((&p.src, &p.minus, lg.grad.d_theta_minus * scale));
                }
                if !loss.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite preference loss at step {step}"
                    )));
                }
                // batch_grad differentiates Σ c·logp, which is the loss here.
                let (_, grad) = model.batch_grad(&items)?;
                Ok((loss, grad))
            })();
            let (loss, mut grad) = match attempt {
                Ok(v) => v,
                Err(e @ (Error::NonFiniteGradient(_) | Error::Invalid(_))) => {
                    warn!("preference training aborted: {e}");
                    return Ok(PrefOutcome {
                        model,
                        history: PrefHistory { initial, epochs },
                        aborted: Some(e.to_string()),
                    });
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            opt.step(model.params_mut(), &grad, sched.lr(step));
            step += 1;
            model.step += 1;
        }
        let stats = margin_stats(&policy_logps(&model, &encoded)?);
        let e = PrefEpoch {
            epoch: epoch + 1,
            mean_loss: loss_sum / encoded.len() as f64,
            mean_margin: stats.mean_margin,
            frac_positive: stats.frac_positive,
        };
        info!(
            "pref epoch {} loss {:.4} margin {:.4} frac+ {:.3}",
            e.epoch, e.mean_loss, e.mean_margin, e.frac_positive
        );
        epochs.push(e);
    }
    Ok(PrefOutcome {
        model,
        history: PrefHistory { initial, epochs },
        aborted: None,
    })
}
