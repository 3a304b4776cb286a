use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use synrewrite::datamodel::{self, Corpus, QueryRecord, Variant};
use synrewrite::leakage::{dataset_leakage, EntityExtractor, LeakageReport, SidecarEntities};
use synrewrite::pipeline::{
    emit_report, eval_gold_docs, run_rag, serialize_input, serialize_target, Format, Generator,
    RagConfig, RagEnv, RagReport, Rewriter, DEFAULT_K, DEFAULT_MAX_LEN,
};
use synrewrite::preftrain::{
    build_preference_pairs, sequence_accuracy, train_preference, train_sft, PairConfig,
    PrefLossConfig, PrefVariant, PreferencePair, SftConfig, SftExample,
};
use synrewrite::retrieval::{EmbeddingProvider, FlatIndex, PrecomputedEmbeddings, DEFAULT_DIM};
use synrewrite::synthesis::{
    self, CompletionProvider, Condition, HttpProvider, PromptTemplate, RetryPolicy,
    RuleBasedProvider, SynthesisJob,
};
use synrewrite::textmetrics::{cosine_matrix, length_stats, LengthStats, MetricReport};
use synrewrite::tinyseq2seq::{
    ScheduleKind, TinySeq2Seq, Vocab, DEFAULT_HIDDEN, DEFAULT_SEED, DEFAULT_VOCAB_CAP,
};
use synrewrite::toy::{self, ToyConfig};

use crate::config::Resolver;
use crate::{
    BuildIndexArgs, BuildPairsArgs, Cli, Command, EvalArgs, Global, LeakageArgs, MakeToyArgs,
    ReportArgs, ReportKind, SynthesizeArgs, TrainPrefArgs, TrainSftArgs,
};

const RUN_MANIFEST: &str = "run-manifest.json";
const EMBEDDER_FILE: &str = "embedder.json";

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let g = cli.global;
    match cli.command {
        Command::Synthesize(a) => synthesize(&g, a),
        Command::AnalyzeLeakage(a) => analyze_leakage(&g, a),
        Command::BuildIndex(a) => build_index(&g, a),
        Command::EvalRetrieval(a) => evaluate(&g, a, Mode::Retrieval),
        Command::EvalGeneration(a) => evaluate(&g, a, Mode::Generation),
        Command::RunRag(a) => evaluate(&g, a, Mode::Rag),
        Command::TrainSft(a) => train_sft_cmd(&g, a),
        Command::BuildPairs(a) => build_pairs(&g, a),
        Command::TrainPref(a) => train_pref(&g, a),
        Command::Report(a) => report(&g, a),
        Command::Selftest => selftest(&g),
        Command::MakeToy(a) => make_toy(&g, a),
    }
}

// ---------------------------------------------------------------- helpers

fn start(g: &Global, command: &str) -> Result<(Resolver, u64)> {
    let mut r = Resolver::new(command, g.config.as_deref())?;
    let seed = r.or("seed", g.seed, DEFAULT_SEED)?;
    r.seed("seed", seed);
    Ok((r, seed))
}

fn format(r: &mut Resolver, g: &Global) -> Result<Format> {
    let flag = g.format.as_deref().map(str::parse::<Format>).transpose()?;
    r.or("format", flag, Format::Json)
}

/// Writes the manifest to --manifest, else into `out_dir` when the command
/// writes a directory. Called once all options are resolved and before any
/// work starts.
fn write_manifest(r: &Resolver, g: &Global, out_dir: Option<&Path>) -> Result<()> {
    if let Some(p) = &g.manifest {
        return r.write_manifest(p);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        return r.write_manifest(&dir.join(RUN_MANIFEST));
    }
    log::debug!("manifest: {}", serde_json::to_string(r.manifest())?);
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => datamodel::write_atomic(p, text.as_bytes())?,
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(items: &[T]) -> Result<String> {
    Ok(if items.len() == 1 {
        serde_json::to_string_pretty(&items[0])?
    } else {
        serde_json::to_string_pretty(items)?
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn grad_clip(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

fn load_records(path: &Path) -> Result<Vec<QueryRecord>> {
    datamodel::load_dialogues(path).with_context(|| format!("loading records {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    datamodel::load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_index(dir: &Path) -> Result<(FlatIndex, EmbeddingProvider)> {
    let index = FlatIndex::load(dir).with_context(|| format!("loading index {}", dir.display()))?;
    let emb = EmbeddingProvider::load(dir.join(EMBEDDER_FILE))
        .with_context(|| format!("loading {EMBEDDER_FILE} from {}", dir.display()))?;
    if emb.dim() != index.dim() {
        bail!(
            "embedder dimension {} does not match index dimension {}",
            emb.dim(),
            index.dim()
        );
    }
    Ok((index, emb))
}

fn load_model(dir: &Path) -> Result<TinySeq2Seq> {
    TinySeq2Seq::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn variants_present(records: &[QueryRecord]) -> Vec<Variant> {
    Variant::ALL
        .into_iter()
        .filter(|v| !records.is_empty() && records.iter().all(|r| r.rewrite(*v).is_some()))
        .collect()
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    Ok(names
        .iter()
        .map(|n| n.parse())
        .collect::<synrewrite::Result<_>>()?)
}

// -------------------------------------------------------------- synthesize

fn synthesize(g: &Global, a: SynthesizeArgs) -> Result<ExitCode> {
    let (mut r, _) = start(g, "synthesize")?;
    let records_path = r.input("records", a.records)?;
    let corpus_path = r.input("corpus", a.corpus)?;
    let condition: Condition = r.req("condition", a.condition.map(|c| c.parse()).transpose()?)?;
    let provider_name = r.or("provider", a.provider, "rules".to_string())?;
    let template_path = r.opt_input("template", a.template)?;
    let cache_dir = r.opt("cache-dir", a.cache_dir)?;
    let concurrency = r.or("concurrency", a.concurrency, 4usize)?;
    let defaults = RetryPolicy::default();
    let max_retries = r.or("max-retries", a.max_retries, defaults.max_retries)?;
    let out: PathBuf = r.req("out", a.out)?;
    write_manifest(&r, g, None)?;

    let provider: Box<dyn CompletionProvider> = match provider_name.as_str() {
        "rules" => Box::new(RuleBasedProvider),
        "http" => Box::new(HttpProvider::from_env()?),
        other => bail!("unknown provider `{other}` (expected rules or http)"),
    };
    let template = match &template_path {
        Some(p) => PromptTemplate::load(condition, p)?,
        None => PromptTemplate::default_for(condition),
    };
    let mut records = load_records(&records_path)?;
    let corpus = load_corpus(&corpus_path)?;
    datamodel::check_references(&records, &corpus)?;
    let outcome = synthesis::synthesize(&SynthesisJob {
        records: &records,
        corpus: &corpus,
        template: &template,
        provider: provider.as_ref(),
        cache_dir,
        max_concurrency: concurrency,
        retry: RetryPolicy {
            max_retries,
            ..defaults
        },
    })?;
    let variant = match condition {
        Condition::Seen => Variant::SynSeen,
        Condition::Unseen => Variant::SynUnseen,
    };
    for rec in &mut records {
        if let Some(text) = outcome.rewrites.get(&rec.record_id) {
            rec.set_rewrite(variant, text.clone())?;
        }
    }
    datamodel::save_jsonl(&out, &records)?;
    for f in &outcome.failures {
        log::warn!("{}: {}", f.record_id, f.reason);
    }
    let summary = json!({
        "variant": variant.as_str(),
        "records": records.len(),
        "rewritten": outcome.rewrites.len(),
        "failures": outcome.failures,
        "provider_calls": outcome.provider_calls,
        "cache_hits": outcome.cache_hits,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------------- leakage

fn leakage_text(reports: &[LeakageReport], fmt: Format) -> Result<String> {
    Ok(match fmt {
        Format::Json => to_json(reports)?,
        Format::Md => {
            let mut s =
                String::from("| variant | Avg LR | Avg PureLR | records |\n|---|---|---|---|\n");
            for rep in reports {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} | {:.4} | {} |",
                    rep.variant,
                    rep.avg_lr,
                    rep.avg_pure_lr,
                    rep.records.len()
                );
            }
            s
        }
        Format::Csv => {
            let mut s = String::from("variant,record_id,N,M,K,lr,pure_lr\n");
            for rep in reports {
                for rec in &rep.records {
                    let st = &rec.stats;
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        rep.variant,
                        csv_field(&rec.record_id),
                        st.n_query_entities,
                        st.m_not_in_history,
                        st.k_solely_from_docans,
                        st.lr,
                        st.pure_lr
                    );
                }
            }
            s
        }
    })
}

fn analyze_leakage(g: &Global, a: LeakageArgs) -> Result<ExitCode> {
    let (mut r, _) = start(g, "analyze-leakage")?;
    let fmt = format(&mut r, g)?;
    let records_path = r.input("records", a.records)?;
    let corpus_path = r.input("corpus", a.corpus)?;
    let variant_names = r.list("variant", a.variants, &[])?;
    let entities = r.opt_input("entities", a.entities)?;
    let out = r.opt("out", a.out)?;
    write_manifest(&r, g, None)?;

    let records = load_records(&records_path)?;
    let corpus = load_corpus(&corpus_path)?;
    let variants = if variant_names.is_empty() {
        variants_present(&records)
            .into_iter()
            .filter(|v| *v != Variant::Raw)
            .collect()
    } else {
        parse_variants(&variant_names)?
    };
    if variants.is_empty() {
        bail!("no rewrite variant present on every record; pass --variant");
    }
    let extractor = match &entities {
        Some(p) => EntityExtractor::Sidecar(SidecarEntities::load(p)?),
        None => EntityExtractor::BuiltinRules,
    };
    let reports = variants
        .iter()
        .map(|v| dataset_leakage(&records, *v, &extractor, &corpus))
        .collect::<synrewrite::Result<Vec<_>>>()?;
    emit(&leakage_text(&reports, fmt)?, out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- index

fn build_index(g: &Global, a: BuildIndexArgs) -> Result<ExitCode> {
    let (mut r, _) = start(g, "build-index")?;
    let corpus_path = r.input("corpus", a.corpus)?;
    let dim = r.or("dim", a.dim, DEFAULT_DIM)?;
    let vectors = r.opt_input("vectors", a.vectors)?;
    let vectors_manifest = r.opt_input("vectors-manifest", a.vectors_manifest)?;
    let out_dir: PathBuf = r.req("out-dir", a.out_dir)?;
    if vectors.is_some() != vectors_manifest.is_some() {
        bail!("--vectors and --vectors-manifest go together");
    }
    write_manifest(&r, g, Some(&out_dir))?;

    let corpus = load_corpus(&corpus_path)?;
    let (provider, sources) = match (&vectors, &vectors_manifest) {
        (Some(v), Some(m)) => {
            let abs =
                |p: &Path| -> Result<String> { Ok(fs::canonicalize(p)?.display().to_string()) };
            let emb = EmbeddingProvider::Precomputed(PrecomputedEmbeddings::load(v, m)?);
            (emb, Some((abs(v)?, abs(m)?)))
        }
        _ => (EmbeddingProvider::fit_tfidf(&corpus, dim)?, None),
    };
    let index = FlatIndex::build(&corpus, &provider)?;
    index.save(&out_dir)?;
    provider.save(
        out_dir.join(EMBEDDER_FILE),
        sources.as_ref().map(|(v, m)| (v.as_str(), m.as_str())),
    )?;
    let summary = json!({
        "documents": index.len(),
        "dim": index.dim(),
        "embedder": if sources.is_some() { "precomputed" } else { "hashed_tfidf" },
        "out_dir": out_dir.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------- evaluation

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Retrieval,
    Generation,
    Rag,
}

#[derive(Serialize)]
struct RetrievalRow {
    method: String,
    k: usize,
    mrr_at_k: Option<f64>,
    n_records: usize,
    failures: usize,
}

#[derive(Serialize)]
struct GenerationRow {
    method: String,
    metrics: Option<MetricReport>,
    failures: Vec<synrewrite::pipeline::RecordFailure>,
}

fn rewriter<'a>(
    name: &str,
    model: Option<&'a TinySeq2Seq>,
    max_len: usize,
) -> Result<Rewriter<'a>> {
    Ok(match name {
        "raw" => Rewriter::Raw,
        "manual" => Rewriter::Manual,
        "model" => Rewriter::Model {
            model: model.context("the `model` rewriter needs --model")?,
            max_len,
        },
        other => Rewriter::Fixed(other.parse()?),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn evaluate(g: &Global, a: EvalArgs, mode: Mode) -> Result<ExitCode> {
    let name = match mode {
        Mode::Retrieval => "eval-retrieval",
        Mode::Generation => "eval-generation",
        Mode::Rag => "run-rag",
    };
    let (mut r, _) = start(g, name)?;
    let fmt = format(&mut r, g)?;
    let records_path = r.input("records", a.records)?;
    let corpus_path = r.input("corpus", a.corpus)?;
    let index_dir = if mode == Mode::Generation {
        None
    } else {
        Some(r.input("index", a.index)?)
    };
    let names = r.list("rewriter", a.rewriters, &["raw"])?;
    let model_dir = if names.iter().any(|n| n == "model") {
        Some(r.input("model", a.model)?)
    } else {
        None
    };
    let generator_name = if mode == Mode::Retrieval {
        "extractive".to_string()
    } else {
        r.or("generator", a.generator, "extractive".to_string())?
    };
    let k = r.or("k", a.k, DEFAULT_K)?;
    let max_len = r.or("max-len", a.max_len, DEFAULT_MAX_LEN)?;
    let out = r.opt("out", a.out)?;
    write_manifest(&r, g, None)?;

    let records = load_records(&records_path)?;
    let corpus = load_corpus(&corpus_path)?;
    datamodel::check_references(&records, &corpus)?;
    let model = model_dir.as_deref().map(load_model).transpose()?;
    let http;
    let generator = match generator_name.as_str() {
        "extractive" => Generator::Extractive,
        "http" => {
            http = HttpProvider::from_env()?;
            Generator::Llm(&http)
        }
        other => bail!("unknown generator `{other}` (expected extractive or http)"),
    };
    let rewriters = names
        .iter()
        .map(|n| rewriter(n, model.as_ref(), max_len))
        .collect::<Result<Vec<_>>>()?;
    for rw in &rewriters {
        rw.check(&records)?;
    }

    if mode == Mode::Generation {
        let mut rows = Vec::new();
        for rw in &rewriters {
            let (metrics, failures) = eval_gold_docs(&records, rw, &generator, &corpus)?;
            rows.push(GenerationRow {
                method: rw.label(),
                metrics,
                failures,
            });
        }
        let text = match fmt {
            Format::Json => to_json(&rows)?,
            Format::Md => {
                let mut s = String::from(
                    "| Method | EM | ROUGE-1 | ROUGE-2 | ROUGE-L | BLEU-4 | n | failures |\n",
                );
                s.push_str("|---|---|---|---|---|---|---|---|\n");
                for row in &rows {
                    let m = row.metrics.as_ref();
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {} | {} | {} | {} |",
                        row.method,
                        fmt_opt(m.map(|m| m.em)),
                        fmt_opt(m.map(|m| m.rouge1)),
                        fmt_opt(m.map(|m| m.rouge2)),
                        fmt_opt(m.map(|m| m.rouge_l)),
                        fmt_opt(m.map(|m| m.bleu4)),
                        m.map_or(0, |m| m.n_samples),
                        row.failures.len()
                    );
                }
                s
            }
            Format::Csv => {
                let mut s =
                    String::from("method,em,rouge1,rouge2,rougeL,bleu4,n_samples,failures\n");
                for row in &rows {
                    let m = row.metrics.as_ref();
                    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{}",
                        csv_field(&row.method),
                        f(m.map(|m| m.em)),
                        f(m.map(|m| m.rouge1)),
                        f(m.map(|m| m.rouge2)),
                        f(m.map(|m| m.rouge_l)),
                        f(m.map(|m| m.bleu4)),
                        m.map_or(0, |m| m.n_samples),
                        row.failures.len()
                    );
                }
                s
            }
        };
        emit(&text, out.as_deref())?;
        return Ok(ExitCode::SUCCESS);
    }

    let (index, emb) = load_index(index_dir.as_deref().unwrap())?;
    let env = RagEnv {
        corpus: &corpus,
        index: &index,
        embedder: &emb,
    };
    let mut reports = Vec::new();
    for rw in rewriters {
        let cfg = RagConfig {
            rewriter: rw,
            generator: match &generator {
                Generator::Extractive => Generator::Extractive,
                Generator::Llm(p) => Generator::Llm(*p),
            },
            k,
        };
        let rep = run_rag(&cfg, &env, &records)?;
        for f in &rep.failures {
            log::warn!(
                "{} [{}] {}: {}",
                rep.rewriter,
                f.stage,
                f.record_id,
                f.message
            );
        }
        reports.push(rep);
    }
    let text = if mode == Mode::Rag {
        emit_report(&reports, fmt)?
    } else {
        let rows: Vec<RetrievalRow> = reports
            .iter()
            .map(|rep| RetrievalRow {
                method: rep.rewriter.clone(),
                k: rep.k,
                mrr_at_k: rep.mrr_at_k,
                n_records: rep.n_records,
                failures: rep.failures.len(),
            })
            .collect();
        match fmt {
            Format::Json => to_json(&rows)?,
            Format::Md => {
                let mut s = format!("| Method | MRR@{k} | n | failures |\n|---|---|---|---|\n");
                for row in &rows {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} |",
                        row.method,
                        fmt_opt(row.mrr_at_k),
                        row.n_records,
                        row.failures
                    );
                }
                s
            }
            Format::Csv => {
                let mut s = String::from("method,k,mrr,n_records,failures\n");
                for row in &rows {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        csv_field(&row.method),
                        row.k,
                        row.mrr_at_k.map_or(String::new(), |x| x.to_string()),
                        row.n_records,
                        row.failures
                    );
                }
                s
            }
        }
    };
    emit(&text, out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- training

#[derive(Serialize)]
struct SftEpoch {
    epoch: usize,
    mean_loss: f64,
    dev_exact_match: Option<f64>,
}

fn train_sft_cmd(g: &Global, a: TrainSftArgs) -> Result<ExitCode> {
    let (mut r, seed) = start(g, "train-sft")?;
    let records_path = r.input("records", a.records)?;
    let target: Variant = r.or(
        "target",
        a.target.map(|t| t.parse()).transpose()?,
        Variant::SynSeen,
    )?;
    let dev_path = r.opt_input("dev", a.dev)?;
    let init = r.opt_input("init", a.init)?;
    let hidden = r.or("hidden", a.hidden, DEFAULT_HIDDEN)?;
    let vocab_cap = r.or("vocab-cap", a.vocab_cap, DEFAULT_VOCAB_CAP)?;
    let d = SftConfig::default();
    let schedule_flag = a.schedule.map(|s| s.parse::<ScheduleKind>()).transpose()?;
    let cfg = SftConfig {
        lr: r.or("lr", a.lr, d.lr)?,
        warmup_ratio: r.or("warmup-ratio", a.warmup_ratio, d.warmup_ratio)?,
        schedule: r.or("schedule", schedule_flag, d.schedule)?,
        epochs: r.or("epochs", a.epochs, d.epochs)?,
        batch_size: r.or("batch-size", a.batch_size, d.batch_size)?,
        grad_clip: grad_clip(r.or("grad-clip", a.grad_clip, d.grad_clip.unwrap_or(0.0))?),
        seed,
    };
    let max_len = DEFAULT_MAX_LEN;
    let out_dir: PathBuf = r.req("out-dir", a.out_dir)?;
    write_manifest(&r, g, Some(&out_dir))?;

    let records = load_records(&records_path)?;
    let target_of = |rec: &QueryRecord| -> Result<String> {
        rec.rewrite(target)
            .map(str::to_string)
            .with_context(|| format!("record {} has no `{target}` rewrite", rec.record_id))
    };
    let mut model = match &init {
        Some(dir) => load_model(dir)?,
        None => {
            let mut texts = Vec::with_capacity(records.len() * 2);
            for rec in &records {
                texts.push(serialize_input(rec));
                texts.push(serialize_target(&target_of(rec)?));
            }
            let vocab = Vocab::build(texts.iter().map(String::as_str), vocab_cap);
            TinySeq2Seq::new(vocab, hidden, seed)
        }
    };
    let examples = |recs: &[QueryRecord], m: &TinySeq2Seq| -> Result<Vec<SftExample>> {
        recs.iter()
            .map(|rec| Ok(SftExample::from_record(m, rec, &target_of(rec)?)))
            .collect()
    };
    let train = examples(&records, &model)?;
    let dev = match &dev_path {
        Some(p) => examples(&load_records(p)?, &model)?,
        None => Vec::new(),
    };
    let mut history = Vec::new();
    let mut eval_error = None;
    train_sft(&mut model, &train, &cfg, |epoch, m, loss| {
        let dev_em = if dev.is_empty() {
            None
        } else {
            match sequence_accuracy(m, &dev, max_len) {
                Ok(acc) => Some(100.0 * acc),
                Err(e) => {
                    eval_error = Some(e);
                    return false;
                }
            }
        };
        log::info!("epoch {epoch}: loss {loss:.4} dev EM {}", fmt_opt(dev_em));
        history.push(SftEpoch {
            epoch,
            mean_loss: loss,
            dev_exact_match: dev_em,
        });
        true
    })?;
    if let Some(e) = eval_error {
        return Err(e.into());
    }
    model.save(&out_dir)?;
    let text = serde_json::to_string_pretty(&json!({ "config": cfg, "epochs": history }))?;
    datamodel::write_atomic(out_dir.join("history.json"), text.as_bytes())?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn build_pairs(g: &Global, a: BuildPairsArgs) -> Result<ExitCode> {
    let (mut r, seed) = start(g, "build-pairs")?;
    let records_path = r.input("records", a.records)?;
    let corpus_path = r.input("corpus", a.corpus)?;
    let index_dir = r.input("index", a.index)?;
    let model_dir = r.input("model", a.model)?;
    let d = PairConfig::default();
    let cfg = PairConfig {
        candidates: r.or("candidates", a.candidates, d.candidates)?,
        temperature: r.or("temperature", a.temperature, d.temperature)?,
        w_retrieval: r.or("w-retrieval", a.w_retrieval, d.w_retrieval)?,
        w_generation: r.or("w-generation", a.w_generation, d.w_generation)?,
        threshold: r.or("threshold", a.threshold, d.threshold)?,
        k: r.or("k", a.k, d.k)?,
        max_len: r.or("max-len", a.max_len, d.max_len)?,
        seed,
    };
    let out: PathBuf = r.req("out", a.out)?;
    write_manifest(&r, g, None)?;

    let records = load_records(&records_path)?;
    let corpus = load_corpus(&corpus_path)?;
    let (index, emb) = load_index(&index_dir)?;
    let model = load_model(&model_dir)?;
    let env = RagEnv {
        corpus: &corpus,
        index: &index,
        embedder: &emb,
    };
    let (pairs, summary) = build_preference_pairs(&records, &model, &env, &cfg)?;
    datamodel::save_jsonl(&out, &pairs)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn train_pref(g: &Global, a: TrainPrefArgs) -> Result<ExitCode> {
    let (mut r, seed) = start(g, "train-pref")?;
    let pairs_path = r.input("pairs", a.pairs)?;
    let model_dir = r.input("model", a.model)?;
    let anchor_dir = r.opt_input("anchor", a.anchor)?;
    let d = PrefLossConfig::default();
    let loss_flag = a.loss.map(|s| s.parse::<PrefVariant>()).transpose()?;
    let schedule_flag = a.schedule.map(|s| s.parse::<ScheduleKind>()).transpose()?;
    let cfg = PrefLossConfig {
        beta: r.or("beta", a.beta, d.beta)?,
        variant: r.or("loss", loss_flag, d.variant)?,
        pair_threshold: r.or("pair-threshold", a.pair_threshold, d.pair_threshold)?,
        epochs: r.or("epochs", a.epochs, d.epochs)?,
        batch_size: r.or("batch-size", a.batch_size, d.batch_size)?,
        grad_accum: r.or("grad-accum", a.grad_accum, d.grad_accum)?,
        lr: r.or("lr", a.lr, d.lr)?,
        warmup_ratio: r.or("warmup-ratio", a.warmup_ratio, d.warmup_ratio)?,
        schedule: r.or("schedule", schedule_flag, d.schedule)?,
        grad_clip: grad_clip(r.or("grad-clip", a.grad_clip, d.grad_clip.unwrap_or(0.0))?),
        seed,
    };
    let out_dir: PathBuf = r.req("out-dir", a.out_dir)?;
    write_manifest(&r, g, Some(&out_dir))?;

    let pairs = load_pairs(&pairs_path)?;
    let sft = load_model(&model_dir)?;
    let anchor = anchor_dir.as_deref().map(load_model).transpose()?;
    let outcome = train_preference(&sft, &pairs, &cfg, anchor.as_ref())?;
    outcome.model.save(&out_dir)?;
    let text = serde_json::to_string_pretty(&json!({
        "config": cfg,
        "history": outcome.history,
        "aborted": outcome.aborted,
    }))?;
    datamodel::write_atomic(out_dir.join("history.json"), text.as_bytes())?;
    println!("{text}");
    if let Some(why) = outcome.aborted {
        eprintln!("error: training aborted ({why}); the last good model was saved");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------ report

fn variant_texts(records: &[QueryRecord], v: Variant) -> Vec<(&QueryRecord, &str)> {
    records
        .iter()
        .filter_map(|r| r.rewrite(v).map(|t| (r, t)))
        .collect()
}

fn report(g: &Global, a: ReportArgs) -> Result<ExitCode> {
    let (mut r, _) = start(g, "report")?;
    let fmt = format(&mut r, g)?;
    let out = r.opt("out", a.out.clone())?;
    match a.kind {
        ReportKind::Lengths => {
            let records_path = r.input("records", a.records)?;
            let names = r.list("variant", a.variants, &[])?;
            write_manifest(&r, g, None)?;
            let records = load_records(&records_path)?;
            let variants = if names.is_empty() {
                Variant::ALL
                    .iter()
                    .copied()
                    .filter(|v| records.iter().any(|r| r.rewrite(*v).is_some()))
                    .collect()
            } else {
                parse_variants(&names)?
            };
            let rows: Vec<(String, LengthStats)> = variants
                .iter()
                .map(|v| {
                    let texts: Vec<&str> = variant_texts(&records, *v)
                        .into_iter()
                        .map(|(_, t)| t)
                        .collect();
                    (v.to_string(), length_stats(&texts))
                })
                .collect();
            let text = match fmt {
                Format::Json => {
                    let map: serde_json::Map<String, serde_json::Value> = rows
                        .iter()
                        .map(|(n, s)| Ok((n.clone(), serde_json::to_value(s)?)))
                        .collect::<Result<_>>()?;
                    serde_json::to_string_pretty(&map)?
                }
                Format::Md => {
                    let mut s = String::from(
                        "| variant | n | mean tokens | min | max |\n|---|---|---|---|---|\n",
                    );
                    for (n, st) in &rows {
                        let _ = writeln!(
                            s,
                            "| {n} | {} | {:.2} | {} | {} |",
                            st.n, st.mean, st.min, st.max
                        );
                    }
                    s
                }
                Format::Csv => {
                    let mut s = String::from("variant,n,mean,min,max\n");
                    for (n, st) in &rows {
                        let _ = writeln!(s, "{n},{},{},{},{}", st.n, st.mean, st.min, st.max);
                    }
                    s
                }
            };
            emit(&text, out.as_deref())?;
        }
        ReportKind::Cosine => {
            let records_path = r.input("records", a.records)?;
            let index_dir = r.input("index", a.index)?;
            let names = r.list("variant", a.variants, &[])?;
            write_manifest(&r, g, None)?;
            let records = load_records(&records_path)?;
            let variants = if names.is_empty() {
                variants_present(&records)
            } else {
                parse_variants(&names)?
            };
            let (_, emb) = load_index(&index_dir)?;
            let mut embedded = Vec::new();
            for v in &variants {
                let vecs = variant_texts(&records, *v)
                    .into_iter()
                    .map(|(rec, t)| emb.embed(&rec.record_id, t))
                    .collect::<synrewrite::Result<Vec<_>>>()
                    .with_context(|| format!("embedding `{v}` rewrites"))?;
                embedded.push((v.to_string(), vecs));
            }
            let m = cosine_matrix(&embedded)?;
            let text = match fmt {
                Format::Csv => m.to_csv(),
                Format::Json => serde_json::to_string_pretty(&m)?,
                Format::Md => {
                    let mut s = format!(
                        "| | {} |\n|---|{}\n",
                        m.names.join(" | "),
                        "---|".repeat(m.names.len())
                    );
                    for (n, row) in m.names.iter().zip(&m.values) {
                        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
                        let _ = writeln!(s, "| {n} | {} |", cells.join(" | "));
                    }
                    s
                }
            };
            emit(&text, out.as_deref())?;
        }
        ReportKind::Render => {
            let inputs = if a.inputs.is_empty() {
                bail!("`report render` needs at least one --input");
            } else {
                a.inputs
            };
            for (i, p) in inputs.iter().enumerate() {
                r.input(&format!("input-{i}"), Some(p.clone()))?;
            }
            write_manifest(&r, g, None)?;
            let mut reports: Vec<RagReport> = Vec::new();
            for p in &inputs {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let value: serde_json::Value = serde_json::from_str(&text)?;
                if value.is_array() {
                    reports.extend(serde_json::from_value::<Vec<RagReport>>(value)?);
                } else {
                    reports.push(serde_json::from_value(value)?);
                }
            }
            emit(&emit_report(&reports, fmt)?, out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------ misc commands

fn selftest(g: &Global) -> Result<ExitCode> {
    let (mut r, seed) = start(g, "selftest")?;
    let fmt = format(&mut r, g)?;
    write_manifest(&r, g, None)?;
    let rep = synrewrite::selftest::run(seed)?;
    match fmt {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rep)?),
        Format::Md | Format::Csv => {
            for c in &rep.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            println!("{:.2}s", rep.seconds);
        }
    }
    Ok(if rep.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn make_toy(g: &Global, a: MakeToyArgs) -> Result<ExitCode> {
    let (mut r, seed) = start(g, "make-toy")?;
    let d = ToyConfig::default();
    let cfg = ToyConfig {
        n_entities: r.or("n-entities", a.n_entities, d.n_entities)?,
        n_train: r.or("n-train", a.n_train, d.n_train)?,
        n_test: r.or("n-test", a.n_test, d.n_test)?,
        seed,
        manual_error_rate: r.or(
            "manual-error-rate",
            a.manual_error_rate,
            d.manual_error_rate,
        )?,
    };
    if cfg.n_entities < 2 {
        bail!("--n-entities must be at least 2");
    }
    if !(0.0..=1.0).contains(&cfg.manual_error_rate) {
        bail!("--manual-error-rate must lie in [0, 1]");
    }
    let out_dir: PathBuf = r.req("out-dir", a.out_dir)?;
    write_manifest(&r, g, Some(&out_dir))?;
    let data = toy::generate(&cfg)?;
    datamodel::save_jsonl(out_dir.join("corpus.jsonl"), data.corpus.documents())?;
    datamodel::save_jsonl(out_dir.join("train.jsonl"), &data.train)?;
    datamodel::save_jsonl(out_dir.join("test.jsonl"), &data.test)?;
    let summary = json!({
        "documents": data.corpus.len(),
        "train": data.train.len(),
        "test": data.test.len(),
        "out_dir": out_dir.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}
