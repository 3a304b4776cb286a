//! Synthetic rewrite generation.
//!
//! Prompts are rendered from editable templates for two annotation
//! conditions: `unseen` (history and query only) and `seen` (additionally
//! the positive document and gold answer). Completions come from a
//! [`CompletionProvider`]; results are cached per
//! `(record_id, condition, template hash, provider id)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{self, Corpus, QueryRecord};
use crate::error::{Error, Result};
use crate::leakage::{self, MentionKind};

const DEFAULT_UNSEEN: &str = include_str!("../templates/unseen.txt");
const DEFAULT_SEEN: &str = include_str!("../templates/seen.txt");

/// Annotation condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unseen,
    Seen,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Unseen => "unseen",
            Condition::Seen => "seen",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unseen" => Ok(Condition::Unseen),
            "seen" => Ok(Condition::Seen),
            _ => Err(Error::invalid(format!("unknown condition `{s}`"))),
        }
    }
}

/// A validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    condition: Condition,
    text: String,
}

impl PromptTemplate {
    pub fn new(condition: Condition, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for required in ["{history}", "{query}"] {
            if !text.contains(required) {
                return Err(Error::Template(format!("missing placeholder {required}")));
            }
        }
        let has_doc = text.contains("{pos_doc}");
        let has_answer = text.contains("{answer}");
        match condition {
            Condition::Unseen if has_doc || has_answer => Err(Error::Template(
                "unseen templates must not reference {pos_doc} or {answer}".into(),
            )),
            Condition::Seen if !(has_doc && has_answer) => Err(Error::Template(
                "seen templates must contain {pos_doc} and {answer}".into(),
            )),
            _ => Ok(Self { condition, text }),
        }
    }

    pub fn default_for(condition: Condition) -> Self {
        let text = match condition {
            Condition::Unseen => DEFAULT_UNSEEN,
            Condition::Seen => DEFAULT_SEEN,
        };
        Self::new(condition, text).expect("bundled templates are valid")
    }

    pub fn load(condition: Condition, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(condition, text)
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Hex SHA-256 of the template text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

fn render_history(record: &QueryRecord) -> String {
    if record.history.is_empty() {
        return String::new();
    }
    let mut out = String::from("Dialogue history (most recent turn first):\n");
    for turn in &record.history {
        out.push_str("User: ");
        out.push_str(&turn.question);
        out.push_str("\nAssistant: ");
        out.push_str(&turn.answer);
        out.push('\n');
    }
    out
}

/// Single-pass placeholder substitution; inserted values are not rescanned.
fn substitute(template: &str, values: &HashMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start..];
        match after.find('}').map(|end| (&after[1..end], end)) {
            Some((name, end)) if values.contains_key(name) => {
                out.push_str(&values[name]);
                rest = &after[end + 1..];
            }
            _ => {
                out.push('{');
                rest = &after[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders the annotation prompt for one record.
pub fn render_prompt(
    record: &QueryRecord,
    template: &PromptTemplate,
    corpus: &Corpus,
) -> Result<String> {
    let mut values = HashMap::new();
    values.insert("history", render_history(record));
    values.insert("query", record.query.clone());
    if template.condition == Condition::Seen {
        let doc = datamodel::resolve_positive(record, corpus)?;
        if record.gold_answer.trim().is_empty() {
            return Err(Error::invalid(format!(
                "record `{}` has no gold answer for a seen prompt",
                record.record_id
            )));
        }
        values.insert("pos_doc", doc.full_text());
        values.insert("answer", record.gold_answer.clone());
    }
    Ok(substitute(&template.text, &values))
}

const PRONOUNS: &[&str] = &["it", "they", "their", "he", "she", "this", "that"];

/// Deterministic rule-based rewrite used as an offline stand-in for an LLM
/// annotator.
///
/// Pronouns in the query are replaced by the most recent capitalized phrase
/// in the history. Under `seen`, the first gold-answer entity that is absent
/// from the history (and from the rewrite) is appended in parentheses.
pub fn mock_resolve(record: &QueryRecord, condition: Condition) -> String {
    let antecedent = record.history.iter().find_map(|turn| {
        [&turn.answer, &turn.question].into_iter().find_map(|text| {
            leakage::entity_mentions(text)
                .into_iter()
                .rev()
                .find(|m| m.kind == MentionKind::Phrase)
                .map(|m| m.text)
        })
    });

    let mut rewrite = match &antecedent {
        Some(np) => replace_pronouns(&record.query, np),
        None => record.query.clone(),
    };

    if condition == Condition::Seen {
        let history = leakage::extract_entities(&record.history_text());
        let present = leakage::extract_entities(&rewrite);
        if let Some(m) = leakage::entity_mentions(&record.gold_answer)
            .into_iter()
            .find(|m| {
                let lower = m.text.to_lowercase();
                !history.contains(&lower) && !present.contains(&lower)
            })
        {
            rewrite = format!("{rewrite} ({})", m.text);
        }
    }
    rewrite
}

fn replace_pronouns(query: &str, replacement: &str) -> String {
    let mut out = String::with_capacity(query.len() + replacement.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if PRONOUNS.contains(&word.to_lowercase().as_str()) {
            out.push_str(replacement);
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in query.chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// One completion request. HTTP providers only read the prompt; offline
/// providers may use the record directly.
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub record: &'a QueryRecord,
    pub condition: Condition,
}

pub trait CompletionProvider: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> String;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String>;
}

/// Provider backed by [`mock_resolve`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedProvider;

impl CompletionProvider for RuleBasedProvider {
    fn id(&self) -> String {
        "mock-rules-v1".into()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String> {
        Ok(mock_resolve(request.record, request.condition))
    }
}

/// Chat-completions style HTTP provider.
///
/// Sends `{"model", "messages":[{"role":"user","content":prompt}],
/// "temperature":0}` and reads `choices[0].message.content` (or a top-level
/// `text` field).
#[derive(Debug, Clone)]
pub struct HttpProvider {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpProvider {
    pub const ENV_ENDPOINT: &'static str = "SYNREWRITE_LLM_ENDPOINT";
    pub const ENV_API_KEY: &'static str = "SYNREWRITE_LLM_API_KEY";
    pub const ENV_MODEL: &'static str = "SYNREWRITE_LLM_MODEL";

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(Self::ENV_ENDPOINT)
            .map_err(|_| Error::invalid(format!("{} is not set", Self::ENV_ENDPOINT)))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(Self::ENV_API_KEY).ok(),
            model: std::env::var(Self::ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
            timeout: Duration::from_secs(60),
        })
    }

    /// Sends a raw prompt and returns the completion text.
    pub fn complete_prompt(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(Error::Provider(format!("HTTP {code}: {text}")));
            }
            Err(e) => return Err(Error::Provider(e.to_string())),
        };
        let value: serde_json::Value = resp
            .into_json()
            .map_err(|e| Error::Provider(format!("bad response body: {e}")))?;
        value
            .pointer("/choices/0/message/content")
            .or_else(|| value.get("text"))
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Provider("response has no completion text".into()))
    }
}

impl CompletionProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String> {
        self.complete_prompt(request.prompt)
    }
}

/// Exponential backoff: `base * factor^attempt`, scaled by a jitter factor
/// drawn from `[0.5, 1.5)` when enabled.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let scale = self.factor.powi(attempt as i32);
        let jitter = if self.jitter {
            rand::thread_rng().gen_range(0.5..1.5)
        } else {
            1.0
        };
        self.base_delay.mul_f64(scale * jitter)
    }
}

/// Everything needed to annotate a batch of records.
pub struct SynthesisJob<'a> {
    pub records: &'a [QueryRecord],
    pub corpus: &'a Corpus,
    pub template: &'a PromptTemplate,
    pub provider: &'a dyn CompletionProvider,
    pub cache_dir: Option<PathBuf>,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutcome {
    pub rewrites: BTreeMap<String, String>,
    pub failures: Vec<SynthesisFailure>,
    pub provider_calls: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    record_id: String,
    condition: Condition,
    template_hash: String,
    provider_id: String,
    rewrite: String,
}

fn cache_file(dir: &Path, condition: Condition, template_hash: &str, provider_id: &str) -> PathBuf {
    let slug: String = provider_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    dir.join(format!("{condition}-{}-{slug}.jsonl", &template_hash[..16]))
}

fn read_cache(path: &Path) -> Result<Vec<CacheEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn call_with_retry(
    provider: &dyn CompletionProvider,
    request: &CompletionRequest<'_>,
    retry: &RetryPolicy,
    calls: &AtomicUsize,
) -> std::result::Result<String, String> {
    let mut last = String::new();
    for attempt in 0..=retry.max_retries {
        if attempt > 0 {
            std::thread::sleep(retry.delay(attempt - 1));
        }
        calls.fetch_add(1, Ordering::SeqCst);
        match provider.complete(request) {
            Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
            Ok(_) => last = "empty response".into(),
            Err(e) => last = e.to_string(),
        }
    }
    Err(format!("{last} (after {} attempts)", retry.max_retries + 1))
}

/// Annotates every record once, reusing cached results.
pub fn synthesize(job: &SynthesisJob<'_>) -> Result<SynthesisOutcome> {
    if job.max_concurrency == 0 {
        return Err(Error::invalid("max_concurrency must be at least 1"));
    }
    let condition = job.template.condition();
    let template_hash = job.template.hash();
    let provider_id = job.provider.id();
    let cache_path = job
        .cache_dir
        .as_deref()
        .map(|d| cache_file(d, condition, &template_hash, &provider_id));

    let mut entries: Vec<CacheEntry> = match &cache_path {
        Some(p) => read_cache(p)?
            .into_iter()
            .filter(|e| {
                e.condition == condition
                    && e.template_hash == template_hash
                    && e.provider_id == provider_id
            })
            .collect(),
        None => Vec::new(),
    };
    let cached: HashMap<String, String> = entries
        .iter()
        .map(|e| (e.record_id.clone(), e.rewrite.clone()))
        .collect();

    let mut outcome = SynthesisOutcome::default();
    let mut pending = Vec::new();
    let wanted: BTreeSet<&str> = job.records.iter().map(|r| r.record_id.as_str()).collect();
    for record in job.records {
        if let Some(text) = cached.get(&record.record_id) {
            outcome
                .rewrites
                .insert(record.record_id.clone(), text.clone());
            outcome.cache_hits += 1;
            continue;
        }
        match render_prompt(record, job.template, job.corpus) {
            Ok(prompt) => pending.push((record, prompt)),
            Err(e) => outcome.failures.push(SynthesisFailure {
                record_id: record.record_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    debug_assert!(outcome.rewrites.keys().all(|k| wanted.contains(k.as_str())));

    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let workers = job.max_concurrency.min(pending.len());
    let (tx, rx) = mpsc::channel();
    let mut write_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, next, calls) = (&pending, &next, &calls);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((record, prompt)) = pending.get(i) else {
                    break;
                };
                let request = CompletionRequest {
                    prompt,
                    record,
                    condition,
                };
                let result = call_with_retry(job.provider, &request, &job.retry, calls);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut unflushed = 0;
        for (i, result) in rx {
            let record_id = pending[i].0.record_id.clone();
            match result {
                Ok(text) => {
                    entries.push(CacheEntry {
                        record_id: record_id.clone(),
                        condition,
                        template_hash: template_hash.clone(),
                        provider_id: provider_id.clone(),
                        rewrite: text.clone(),
                    });
                    outcome.rewrites.insert(record_id, text);
                    unflushed += 1;
                }
                Err(reason) => outcome
                    .failures
                    .push(SynthesisFailure { record_id, reason }),
            }
            if unflushed >= 32 {
                if let Some(p) = &cache_path {
                    if let Err(e) = datamodel::save_jsonl(p, &entries) {
                        write_error.get_or_insert(e);
                    }
                }
                unflushed = 0;
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    if let Some(p) = &cache_path {
        datamodel::save_jsonl(p, &entries)?;
    }
    outcome
        .failures
        .sort_by(|a, b| a.record_id.cmp(&b.record_id));
    outcome.provider_calls = calls.into_inner();
    Ok(outcome)
}
