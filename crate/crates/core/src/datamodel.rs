//! Canonical record types and JSONL ingestion.
//!
//! Three line-oriented schemas are supported:
//!
//! * dialogues: `{"record_id","turn_index","history":[{"q","a"}],"query",
//!   "manual_rewrite","pos_doc_id","gold_answer","rewrites":{...}}`
//! * corpus: `{"doc_id","title","body"}`
//! * entities: `{"record_id","field","entities":[...]}`, optionally preceded
//!   by a single header object of the form `{"header": {...}}`.
//!
//! `history` is stored most-recent-first: element 0 is turn `n-1`, the last
//! element is turn 0.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named rewrite variants carried by a [`QueryRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    Manual,
    SynUnseen,
    SynSeen,
    Model,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Raw,
        Variant::Manual,
        Variant::SynUnseen,
        Variant::SynSeen,
        Variant::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Manual => "manual",
            Variant::SynUnseen => "syn_unseen",
            Variant::SynSeen => "syn_seen",
            Variant::Model => "model",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown rewrite variant `{s}`")))
    }
}

/// One answered turn of dialogue history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
}

impl DialogueTurn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// A single dialogue turn to be rewritten.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub record_id: String,
    pub turn_index: usize,
    /// Most recent turn first.
    pub history: Vec<DialogueTurn>,
    pub query: String,
    #[serde(default)]
    pub manual_rewrite: Option<String>,
    #[serde(default)]
    pub pos_doc_id: Option<String>,
    pub gold_answer: String,
    #[serde(default)]
    rewrites: BTreeMap<Variant, String>,
}

impl QueryRecord {
    /// Builds a record whose `turn_index` is the history length and whose
    /// `raw` variant is the query.
    pub fn new(
        record_id: impl Into<String>,
        history: Vec<DialogueTurn>,
        query: impl Into<String>,
        pos_doc_id: Option<String>,
        gold_answer: impl Into<String>,
    ) -> Self {
        let query = query.into();
        let mut rewrites = BTreeMap::new();
        rewrites.insert(Variant::Raw, query.clone());
        Self {
            record_id: record_id.into(),
            turn_index: history.len(),
            history,
            query,
            manual_rewrite: None,
            pos_doc_id,
            gold_answer: gold_answer.into(),
            rewrites,
        }
    }

    pub fn with_manual(mut self, manual: impl Into<String>) -> Self {
        let manual = manual.into();
        self.rewrites.insert(Variant::Manual, manual.clone());
        self.manual_rewrite = Some(manual);
        self
    }

    pub fn rewrite(&self, variant: Variant) -> Option<&str> {
        self.rewrites.get(&variant).map(String::as_str)
    }

    pub fn rewrites(&self) -> &BTreeMap<Variant, String> {
        &self.rewrites
    }

    /// Sets a rewrite variant. The `raw` entry can only be set to the query.
    pub fn set_rewrite(&mut self, variant: Variant, text: impl Into<String>) -> Result<()> {
        let text = text.into();
        if variant == Variant::Raw && text != self.query {
            return Err(Error::invalid(format!(
                "record `{}`: the raw variant must equal the query",
                self.record_id
            )));
        }
        if variant == Variant::Manual {
            self.manual_rewrite = Some(text.clone());
        }
        self.rewrites.insert(variant, text);
        Ok(())
    }

    /// Removes a variant; the `raw` entry is never removed.
    pub fn remove_rewrite(&mut self, variant: Variant) -> Result<Option<String>> {
        if variant == Variant::Raw {
            return Err(Error::invalid("the raw variant cannot be removed"));
        }
        if variant == Variant::Manual {
            self.manual_rewrite = None;
        }
        Ok(self.rewrites.remove(&variant))
    }

    /// Concatenated history text, one turn component per line.
    pub fn history_text(&self) -> String {
        self.history
            .iter()
            .flat_map(|t| [t.question.as_str(), t.answer.as_str()])
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn validate(&mut self) -> std::result::Result<(), (String, String)> {
        if self.record_id.trim().is_empty() {
            return Err(("record_id".into(), "must be non-empty".into()));
        }
        if self.query.trim().is_empty() {
            return Err(("query".into(), "must be non-empty".into()));
        }
        if self.history.len() != self.turn_index {
            return Err((
                "turn_index".into(),
                format!(
                    "history has {} turns but turn_index is {}",
                    self.history.len(),
                    self.turn_index
                ),
            ));
        }
        for (i, turn) in self.history.iter().enumerate() {
            if turn.question.trim().is_empty() {
                return Err((format!("history[{i}].q"), "must be non-empty".into()));
            }
            if turn.answer.trim().is_empty() {
                return Err((
                    format!("history[{i}].a"),
                    "answered turns must carry an answer".into(),
                ));
            }
        }
        match self.rewrites.get(&Variant::Raw) {
            Some(raw) if raw != &self.query => {
                return Err(("rewrites.raw".into(), "must equal `query`".into()));
            }
            Some(_) => {}
            None => {
                self.rewrites.insert(Variant::Raw, self.query.clone());
            }
        }
        match (&self.manual_rewrite, self.rewrites.get(&Variant::Manual)) {
            (Some(m), Some(r)) if m != r => {
                return Err((
                    "rewrites.manual".into(),
                    "disagrees with `manual_rewrite`".into(),
                ));
            }
            (Some(m), None) => {
                let m = m.clone();
                self.rewrites.insert(Variant::Manual, m);
            }
            (None, Some(r)) => self.manual_rewrite = Some(r.clone()),
            _ => {}
        }
        Ok(())
    }
}

/// A retrievable passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            body: body.into(),
        }
    }

    /// Title and body as one text, title first.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

/// Which text an entity annotation was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityField {
    QueryRewrite,
    History,
    DocAndAnswer,
}

impl EntityField {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityField::QueryRewrite => "query_rewrite",
            EntityField::History => "history",
            EntityField::DocAndAnswer => "doc_and_answer",
        }
    }
}

impl fmt::Display for EntityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercased entity set for one field of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub record_id: String,
    pub field: EntityField,
    pub entities: BTreeSet<String>,
}

impl EntityAnnotation {
    fn normalize(&mut self) -> std::result::Result<(), (String, String)> {
        if self.entities.iter().any(|e| e.trim().is_empty()) {
            return Err(("entities".into(), "contains an empty entity".into()));
        }
        self.entities = self
            .entities
            .iter()
            .map(|e| e.trim().to_lowercase())
            .collect();
        Ok(())
    }
}

/// Document store with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Duplicate {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: d.doc_id.clone(),
                });
            }
        }
        Ok(Self { docs, by_id })
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Which schema a JSONL file follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Dialogues,
    Corpus,
    Entities,
}

/// Validated contents of a JSONL file.
#[derive(Debug, Clone)]
pub enum Dataset {
    Dialogues(Vec<QueryRecord>),
    Corpus(Vec<Document>),
    Entities(Vec<EntityAnnotation>),
}

pub fn load_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<Dataset> {
    let path = path.as_ref();
    Ok(match schema {
        Schema::Dialogues => Dataset::Dialogues(load_dialogues(path)?),
        Schema::Corpus => Dataset::Corpus(load_documents(path)?),
        Schema::Entities => Dataset::Entities(load_entities(path)?.1),
    })
}

/// Iterates non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<(String, Vec<(usize, String)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect();
    Ok((path.display().to_string(), lines))
}

/// Pulls the backtick-quoted field name out of a serde error message.
fn field_from_serde_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<unknown>").to_string()
}

fn parse_line<T: DeserializeOwned>(path: &str, line_no: usize, line: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
    if !value.is_object() {
        return Err(Error::MalformedLine {
            path: path.to_string(),
            line: line_no,
            message: "expected a JSON object".into(),
        });
    }
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        Error::Schema {
            path: path.to_string(),
            line: line_no,
            field: field_from_serde_message(&msg),
            message: msg,
        }
    })
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let (name, lines) = read_lines(path.as_ref())?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let mut rec: QueryRecord = parse_line(&name, line_no, &line)?;
        rec.validate().map_err(|(field, message)| Error::Schema {
            path: name.clone(),
            line: line_no,
            field,
            message,
        })?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(Error::Duplicate {
                path: name.clone(),
                line: line_no,
                id: rec.record_id,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let (name, lines) = read_lines(path.as_ref())?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let doc: Document = parse_line(&name, line_no, &line)?;
        let bad = |field: &str, message: &str| Error::Schema {
            path: name.clone(),
            line: line_no,
            field: field.into(),
            message: message.into(),
        };
        if doc.doc_id.trim().is_empty() {
            return Err(bad("doc_id", "must be non-empty"));
        }
        if doc.body.trim().is_empty() {
            return Err(bad("body", "must be non-empty"));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::Duplicate {
                path: name.clone(),
                line: line_no,
                id: doc.doc_id,
            });
        }
        out.push(doc);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_documents(load_documents(path)?)
}

/// Loads an entity file, returning the optional header object and the
/// annotations. Entities are lowercased.
pub fn load_entities(
    path: impl AsRef<Path>,
) -> Result<(Option<serde_json::Value>, Vec<EntityAnnotation>)> {
    let (name, lines) = read_lines(path.as_ref())?;
    let mut header = None;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (idx, (line_no, line)) in lines.into_iter().enumerate() {
        if idx == 0 {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&line) {
                if map.contains_key("header") && !map.contains_key("record_id") {
                    header = map.get("header").cloned();
                    continue;
                }
            }
        }
        let mut ann: EntityAnnotation = parse_line(&name, line_no, &line)?;
        ann.normalize().map_err(|(field, message)| Error::Schema {
            path: name.clone(),
            line: line_no,
            field,
            message,
        })?;
        if !seen.insert((ann.record_id.clone(), ann.field)) {
            return Err(Error::Duplicate {
                path: name.clone(),
                line: line_no,
                id: format!("{}/{}", ann.record_id, ann.field),
            });
        }
        out.push(ann);
    }
    Ok((header, out))
}

/// Serializes items one per line in canonical (field-ordered) JSON.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `contents` to `path` via a temporary file and rename.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

/// Returns the positive document of `record`.
pub fn resolve_positive<'c>(record: &QueryRecord, corpus: &'c Corpus) -> Result<&'c Document> {
    let dangling = || Error::DanglingReference {
        record_ids: vec![record.record_id.clone()],
    };
    let id = record.pos_doc_id.as_deref().ok_or_else(dangling)?;
    corpus.get(id).ok_or_else(dangling)
}

/// Checks that every record with a `pos_doc_id` resolves, listing all
/// offenders at once.
pub fn check_references(records: &[QueryRecord], corpus: &Corpus) -> Result<()> {
    let record_ids: Vec<String> = records
        .iter()
        .filter(|r| matches!(&r.pos_doc_id, Some(id) if corpus.get(id).is_none()))
        .map(|r| r.record_id.clone())
        .collect();
    if record_ids.is_empty() {
        Ok(())
    } else {
        Err(Error::DanglingReference { record_ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const LINE: &str = r#"{"record_id":"r1","turn_index":1,"history":[{"q":"who runs Alpaca Farm?","a":"Jane Doe runs Alpaca Farm."}],"query":"where is it?","manual_rewrite":"where is Alpaca Farm?","pos_doc_id":"d1","gold_answer":"Peru","rewrites":{}}"#;

    #[test]
    fn empty_file_is_empty_list() {
        let f = write_tmp("");
        assert!(load_dialogues(f.path()).unwrap().is_empty());
        match load_dataset(f.path(), Schema::Corpus).unwrap() {
            Dataset::Corpus(d) => assert!(d.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_line_sets_raw_and_manual() {
        let f = write_tmp(LINE);
        let recs = load_dialogues(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].rewrite(Variant::Raw), Some("where is it?"));
        assert_eq!(
            recs[0].rewrite(Variant::Manual),
            Some("where is Alpaca Farm?")
        );
    }

    #[test]
    fn missing_query_names_field_and_line() {
        let f = write_tmp(r#"{"record_id":"r1","turn_index":0,"history":[],"gold_answer":"x"}"#);
        match load_dialogues(f.path()).unwrap_err() {
            Error::Schema { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "query");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_tmp(&format!("{LINE}\n{{not json\n"));
        match load_dialogues(f.path()).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn turn_index_mismatch_rejected() {
        let bad = LINE.replace(r#""turn_index":1"#, r#""turn_index":2"#);
        let f = write_tmp(&bad);
        match load_dialogues(f.path()).unwrap_err() {
            Error::Schema { field, .. } => assert_eq!(field, "turn_index"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn raw_must_match_query() {
        let bad = LINE.replace(r#""rewrites":{}"#, r#""rewrites":{"raw":"other"}"#);
        let f = write_tmp(&bad);
        assert!(matches!(
            load_dialogues(f.path()).unwrap_err(),
            Error::Schema { field, .. } if field == "rewrites.raw"
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp(&format!("{LINE}\n{LINE}\n"));
        assert!(matches!(
            load_dialogues(f.path()).unwrap_err(),
            Error::Duplicate { line: 2, .. }
        ));
        let f = write_tmp(
            "{\"doc_id\":\"d1\",\"title\":\"t\",\"body\":\"b\"}\n{\"doc_id\":\"d1\",\"title\":\"t\",\"body\":\"c\"}\n",
        );
        assert!(matches!(
            load_corpus(f.path()).unwrap_err(),
            Error::Duplicate { .. }
        ));
    }

    #[test]
    fn empty_body_rejected() {
        let f = write_tmp(r#"{"doc_id":"d1","title":"t","body":"  "}"#);
        assert!(matches!(
            load_corpus(f.path()).unwrap_err(),
            Error::Schema { field, .. } if field == "body"
        ));
    }

    #[test]
    fn entities_lowercased_with_header() {
        let f = write_tmp(
            "{\"header\":{\"model\":\"x\"}}\n{\"record_id\":\"r1\",\"field\":\"history\",\"entities\":[\"Alpaca Farm\",\"alpaca farm\",\"2012\"]}\n",
        );
        let (header, anns) = load_entities(f.path()).unwrap();
        assert!(header.is_some());
        assert_eq!(anns.len(), 1);
        assert_eq!(
            anns[0].entities.iter().cloned().collect::<Vec<_>>(),
            vec!["2012".to_string(), "alpaca farm".to_string()]
        );
    }

    #[test]
    fn empty_entity_rejected() {
        let f = write_tmp(r#"{"record_id":"r1","field":"history","entities":[""]}"#);
        assert!(matches!(
            load_entities(f.path()).unwrap_err(),
            Error::Schema { .. }
        ));
    }

    #[test]
    fn resolve_positive_lookup() {
        let corpus = Corpus::from_documents(vec![Document::new("d1", "T", "body")]).unwrap();
        let mut rec = QueryRecord::new("r1", vec![], "q", Some("d1".into()), "a");
        assert_eq!(resolve_positive(&rec, &corpus).unwrap().doc_id, "d1");
        rec.pos_doc_id = Some("dX".into());
        match resolve_positive(&rec, &corpus).unwrap_err() {
            Error::DanglingReference { record_ids } => assert_eq!(record_ids, vec!["r1"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn hundred_resolvable_records() {
        let docs: Vec<_> = (0..100)
            .map(|i| Document::new(format!("d{i}"), "t", "b"))
            .collect();
        let corpus = Corpus::from_documents(docs).unwrap();
        let recs: Vec<_> = (0..100)
            .map(|i| {
                QueryRecord::new(
                    format!("r{i}"),
                    vec![],
                    "q",
                    Some(format!("d{}", 99 - i)),
                    "a",
                )
            })
            .collect();
        check_references(&recs, &corpus).unwrap();
        for r in &recs {
            resolve_positive(r, &corpus).unwrap();
        }
    }

    #[test]
    fn raw_variant_survives_mutation() {
        let mut rec = QueryRecord::new("r1", vec![], "q", None, "a");
        assert!(rec.remove_rewrite(Variant::Raw).is_err());
        assert!(rec.set_rewrite(Variant::Raw, "other").is_err());
        rec.set_rewrite(Variant::Model, "m").unwrap();
        rec.remove_rewrite(Variant::Model).unwrap();
        assert_eq!(rec.rewrite(Variant::Raw), Some("q"));
    }

    #[test]
    fn canonical_round_trip() {
        let f = write_tmp(LINE);
        let recs = load_dialogues(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(out.path(), &recs).unwrap();
        let again = load_dialogues(out.path()).unwrap();
        assert_eq!(recs, again);
        assert_eq!(to_jsonl(&recs).unwrap(), to_jsonl(&again).unwrap());
    }
}
