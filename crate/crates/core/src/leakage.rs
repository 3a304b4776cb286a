//! Entity leakage auditing.
//!
//! For a rewritten query with entity set `Q`, history entities `H` and
//! gold document + answer entities `D`:
//!
//! ```text
//! N = |Q|
//! M = |Q \ H|
//! K = |{e ∈ Q : e ∈ D, e ∉ H}|
//! LR = K / M      (0 when M = 0)
//! PureLR = K / N  (0 when N = 0)
//! ```
//!
//! Entities found in neither `H` nor `D` count toward `M` and `N` only.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{self, Corpus, EntityAnnotation, EntityField, QueryRecord, Variant};
use crate::error::{Error, Result};

/// Words ignored when they start a sentence with a capital letter.
const SENTENCE_STOPWORDS: &[&str] = &[
    "a", "about", "after", "also", "an", "and", "are", "as", "at", "before", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "here", "his",
    "how", "i", "if", "in", "is", "it", "its", "may", "might", "my", "no", "not", "of", "ok",
    "okay", "on", "or", "our", "please", "she", "should", "so", "sure", "tell", "that", "the",
    "their", "then", "there", "these", "they", "this", "those", "to", "was", "we", "well", "were",
    "what", "when", "where", "which", "who", "whom", "whose", "why", "will", "with", "would",
    "yes", "you", "your",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MentionKind {
    /// A maximal run of capitalized tokens.
    Phrase,
    /// A standalone number (including years).
    Number,
}

/// An entity mention with its original casing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub text: String,
    pub kind: MentionKind,
}

fn is_number(core: &str) -> bool {
    core.chars().next().is_some_and(|c| c.is_ascii_digit())
        && core
            .chars()
            .all(|c| c.is_ascii_digit() || c == ',' || c == '.')
}

/// Finds capitalized runs and numbers in text, in order of appearance.
/// Line breaks and `.`, `!`, `?` end sentences; any punctuation attached to
/// a token ends the current run.
pub fn entity_mentions(text: &str) -> Vec<Mention> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut run: Vec<&str> = Vec::new();
        let mut sentence_start = true;
        let flush = |run: &mut Vec<&str>, out: &mut Vec<Mention>| {
            if !run.is_empty() {
                out.push(Mention {
                    text: run.join(" "),
                    kind: MentionKind::Phrase,
                });
                run.clear();
            }
        };
        for raw in line.split_whitespace() {
            let lead = raw.len() - raw.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
            let mut core = raw[lead..].trim_end_matches(|c: char| !c.is_alphanumeric());
            let trail = &raw[lead + core.len()..];
            let mut breaks_after = !trail.is_empty();
            for suffix in ["'s", "’s"] {
                if let Some(stem) = core.strip_suffix(suffix) {
                    core = stem.trim_end_matches(|c: char| !c.is_alphanumeric());
                    breaks_after = true;
                }
            }
            let ends_sentence = trail.contains(['.', '!', '?']);
            if lead > 0 {
                flush(&mut run, &mut out);
            }
            if core.is_empty() {
                flush(&mut run, &mut out);
            } else if is_number(core) {
                flush(&mut run, &mut out);
                out.push(Mention {
                    text: core.trim_end_matches([',', '.']).to_string(),
                    kind: MentionKind::Number,
                });
            } else if core.chars().next().is_some_and(char::is_uppercase)
                && core != "I"
                && !(sentence_start && SENTENCE_STOPWORDS.contains(&core.to_lowercase().as_str()))
            {
                run.push(core);
            } else {
                flush(&mut run, &mut out);
            }
            if breaks_after {
                flush(&mut run, &mut out);
            }
            sentence_start = ends_sentence;
        }
        flush(&mut run, &mut out);
    }
    out
}

/// Builtin rule-based extractor: lowercased capitalized runs and numbers.
pub fn extract_entities(text: &str) -> BTreeSet<String> {
    entity_mentions(text)
        .into_iter()
        .map(|m| m.text.to_lowercase())
        .collect()
}

/// Entity sets loaded from an external annotation file.
#[derive(Debug, Clone, Default)]
pub struct SidecarEntities {
    variant: Option<String>,
    sets: HashMap<(String, EntityField), BTreeSet<String>>,
}

impl SidecarEntities {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, anns) = datamodel::load_entities(path)?;
        let variant = header
            .as_ref()
            .and_then(|h| h.get("variant"))
            .and_then(|v| v.as_str())
            .map(str::to_string);
        Ok(Self::from_annotations(anns).with_variant(variant))
    }

    pub fn from_annotations(anns: Vec<EntityAnnotation>) -> Self {
        Self {
            variant: None,
            sets: anns
                .into_iter()
                .map(|a| ((a.record_id, a.field), a.entities))
                .collect(),
        }
    }

    pub fn with_variant(mut self, variant: Option<String>) -> Self {
        self.variant = variant;
        self
    }

    pub fn variant(&self) -> Option<&str> {
        self.variant.as_deref()
    }
}

/// Source of entity sets.
#[derive(Debug, Clone, Default)]
pub enum EntityExtractor {
    #[default]
    BuiltinRules,
    Sidecar(SidecarEntities),
}

impl EntityExtractor {
    /// Entities for one field of one record. The builtin extractor reads
    /// `text`; the sidecar looks up `(record_id, field)`.
    pub fn entities(
        &self,
        record_id: &str,
        field: EntityField,
        text: &str,
    ) -> Result<BTreeSet<String>> {
        match self {
            EntityExtractor::BuiltinRules => Ok(extract_entities(text)),
            EntityExtractor::Sidecar(s) => s
                .sets
                .get(&(record_id.to_string(), field))
                .cloned()
                .ok_or_else(|| Error::MissingEntities {
                    record_id: record_id.to_string(),
                    field: field.to_string(),
                }),
        }
    }
}

/// Per-record entity counts and leakage ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageStats {
    #[serde(rename = "N")]
    pub n_query_entities: usize,
    #[serde(rename = "M")]
    pub m_not_in_history: usize,
    #[serde(rename = "K")]
    pub k_solely_from_docans: usize,
    pub lr: f64,
    pub pure_lr: f64,
}

pub fn leakage_for_record(
    query: &BTreeSet<String>,
    history: &BTreeSet<String>,
    docans: &BTreeSet<String>,
) -> LeakageStats {
    let n = query.len();
    let outside: Vec<&String> = query.iter().filter(|e| !history.contains(*e)).collect();
    let m = outside.len();
    let k = outside.iter().filter(|e| docans.contains(**e)).count();
    LeakageStats {
        n_query_entities: n,
        m_not_in_history: m,
        k_solely_from_docans: k,
        lr: if m == 0 { 0.0 } else { k as f64 / m as f64 },
        pure_lr: if n == 0 { 0.0 } else { k as f64 / n as f64 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLeakage {
    pub record_id: String,
    #[serde(flatten)]
    pub stats: LeakageStats,
}

/// Dataset-level leakage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub variant: String,
    pub avg_lr: f64,
    pub avg_pure_lr: f64,
    pub records: Vec<RecordLeakage>,
}

/// Unweighted mean leakage of `variant` over all records.
pub fn dataset_leakage(
    records: &[QueryRecord],
    variant: Variant,
    extractor: &EntityExtractor,
    corpus: &Corpus,
) -> Result<LeakageReport> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.rewrite(variant).is_none())
        .map(|r| r.record_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingVariant {
            variant: variant.to_string(),
            record_ids: missing,
        });
    }
    if let EntityExtractor::Sidecar(s) = extractor {
        if let Some(v) = s.variant() {
            if v != variant.as_str() {
                return Err(Error::invalid(format!(
                    "entity file was exported for variant `{v}`, not `{variant}`"
                )));
            }
        }
    }
    let per: Vec<RecordLeakage> = records
        .par_iter()
        .map(|r| {
            let rewrite = r.rewrite(variant).unwrap_or_default();
            let mut docans_text = String::new();
            if r.pos_doc_id.is_some() {
                docans_text.push_str(&datamodel::resolve_positive(r, corpus)?.full_text());
                docans_text.push('\n');
            }
            docans_text.push_str(&r.gold_answer);
            let id = r.record_id.as_str();
            let q = extractor.entities(id, EntityField::QueryRewrite, rewrite)?;
            let h = extractor.entities(id, EntityField::History, &r.history_text())?;
            let d = extractor.entities(id, EntityField::DocAndAnswer, &docans_text)?;
            Ok(RecordLeakage {
                record_id: r.record_id.clone(),
                stats: leakage_for_record(&q, &h, &d),
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok(LeakageReport {
        variant: variant.to_string(),
        avg_lr: per.iter().map(|r| r.stats.lr).sum::<f64>() / n,
        avg_pure_lr: per.iter().map(|r| r.stats.pure_lr).sum::<f64>() / n,
        records: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DialogueTurn, Document};
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builtin_examples() {
        assert!(extract_entities("").is_empty());
        assert_eq!(
            extract_entities("Neighborhood Watch aired on White Collar in 2012"),
            set(&["neighborhood watch", "white collar", "2012"])
        );
        assert!(extract_entities("the alpacas ate grass").is_empty());
    }

    #[test]
    fn sentence_initial_stopword_skipped_but_not_midsentence_capitals() {
        assert_eq!(
            extract_entities("Where is Alpaca Farm? It is in Peru."),
            set(&["alpaca farm", "peru"])
        );
        assert_eq!(extract_entities("Paris, France"), set(&["paris", "france"]));
        assert_eq!(extract_entities("I met Bob"), set(&["bob"]));
        assert_eq!(
            extract_entities("visit Alpaca Farm's cafe"),
            set(&["alpaca farm"])
        );
    }

    #[test]
    fn mentions_keep_case_and_order() {
        let m = entity_mentions("Jane Doe runs Alpaca Farm since 1999");
        let texts: Vec<_> = m.iter().map(|m| m.text.as_str()).collect();
        assert_eq!(texts, ["Jane Doe", "Alpaca Farm", "1999"]);
        assert_eq!(m[2].kind, MentionKind::Number);
    }

    #[test]
    fn leakage_examples() {
        let s = leakage_for_record(&set(&[]), &set(&["x"]), &set(&["y"]));
        assert_eq!(
            (
                s.n_query_entities,
                s.m_not_in_history,
                s.k_solely_from_docans
            ),
            (0, 0, 0)
        );
        assert_eq!((s.lr, s.pure_lr), (0.0, 0.0));

        let s = leakage_for_record(&set(&["a", "b", "c"]), &set(&["a"]), &set(&["b"]));
        assert_eq!(
            (
                s.n_query_entities,
                s.m_not_in_history,
                s.k_solely_from_docans
            ),
            (3, 2, 1)
        );
        assert_eq!(s.lr, 0.5);
        assert!((s.pure_lr - 1.0 / 3.0).abs() < 1e-15);

        let s = leakage_for_record(&set(&["a", "b"]), &set(&["a", "b", "c"]), &set(&["a", "b"]));
        assert_eq!(s.m_not_in_history, 0);
        assert_eq!(s.lr, 0.0);
    }

    fn fixture() -> (Vec<QueryRecord>, Corpus) {
        let corpus = Corpus::from_documents(vec![Document::new(
            "d1",
            "Alpaca Farm",
            "Alpaca Farm is located in Peru.",
        )])
        .unwrap();
        let hist = vec![DialogueTurn::new(
            "tell me about Alpaca Farm",
            "it is a farm",
        )];
        let mut r1 = QueryRecord::new(
            "r1",
            hist.clone(),
            "where is it?",
            Some("d1".into()),
            "Peru",
        );
        r1.set_rewrite(Variant::Model, "where is Alpaca Farm in Peru?")
            .unwrap();
        let mut r2 = QueryRecord::new("r2", hist, "where is it?", Some("d1".into()), "Peru");
        r2.set_rewrite(Variant::Model, "where is Alpaca Farm?")
            .unwrap();
        (vec![r1, r2], corpus)
    }

    #[test]
    fn dataset_mean() {
        let (recs, corpus) = fixture();
        let rep = dataset_leakage(
            &recs,
            Variant::Model,
            &EntityExtractor::BuiltinRules,
            &corpus,
        )
        .unwrap();
        // r1: Q={alpaca farm, peru}, H={alpaca farm}: M=1, K=1 → LR 1, PureLR 0.5
        assert_eq!(rep.records[0].stats.lr, 1.0);
        assert_eq!(rep.records[0].stats.pure_lr, 0.5);
        assert_eq!(rep.records[1].stats.lr, 0.0);
        assert_eq!(rep.avg_lr, 0.5);
        assert_eq!(rep.avg_pure_lr, 0.25);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["records"][0]["N"], 2);
        assert_eq!(json["records"][0]["record_id"], "r1");
    }

    #[test]
    fn entity_free_queries_score_zero() {
        let (mut recs, corpus) = fixture();
        for r in &mut recs {
            r.set_rewrite(Variant::Model, "where is it").unwrap();
        }
        let rep = dataset_leakage(
            &recs,
            Variant::Model,
            &EntityExtractor::BuiltinRules,
            &corpus,
        )
        .unwrap();
        assert_eq!((rep.avg_lr, rep.avg_pure_lr), (0.0, 0.0));
    }

    #[test]
    fn missing_variant_lists_records() {
        let (recs, corpus) = fixture();
        match dataset_leakage(
            &recs,
            Variant::SynSeen,
            &EntityExtractor::BuiltinRules,
            &corpus,
        ) {
            Err(Error::MissingVariant { record_ids, .. }) => assert_eq!(record_ids, ["r1", "r2"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sidecar_missing_record_named() {
        let (recs, corpus) = fixture();
        let side = SidecarEntities::from_annotations(vec![EntityAnnotation {
            record_id: "r1".into(),
            field: EntityField::QueryRewrite,
            entities: set(&["peru"]),
        }]);
        let err = dataset_leakage(
            &recs,
            Variant::Model,
            &EntityExtractor::Sidecar(side),
            &corpus,
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("r1") || err.to_string().contains("r2"),
            "{err}"
        );
    }

    fn small_set() -> impl Strategy<Value = BTreeSet<String>> {
        proptest::collection::btree_set("[a-h]", 0..8)
    }

    proptest! {
        #[test]
        fn counts_are_ordered(q in small_set(), h in small_set(), d in small_set()) {
            let s = leakage_for_record(&q, &h, &d);
            prop_assert!(s.k_solely_from_docans <= s.m_not_in_history);
            prop_assert!(s.m_not_in_history <= s.n_query_entities);
            prop_assert!((0.0..=1.0).contains(&s.lr));
            prop_assert!((0.0..=1.0).contains(&s.pure_lr));
        }
    }
}
