//! Synthetic coreference-rewriting fixture.
//!
//! Every entity has one document. Dialogues mention the target entity in
//! the most recent turn (and, for two-turn dialogues, a distractor entity
//! in the older turn); the final query refers to the target with "it".
//! The correct rewrite substitutes the target's name.
//!
//! The `manual` variant imitates noisy human rewrites: queries asking who
//! owns the entity are left unresolved ("Who owns it?") with probability
//! `manual_error_rate`. Everything else matches the correct rewrite.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Corpus, DialogueTurn, Document, QueryRecord};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_entities: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub manual_error_rate: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_entities: 60,
            n_train: 2000,
            n_test: 200,
            seed: 17,
            manual_error_rate: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEntity {
    pub name: String,
    pub doc_id: String,
    pub city: String,
    pub founded: u32,
    pub feature: String,
    pub owner: String,
    pub festival: String,
    pub festival_year: u32,
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub entities: Vec<ToyEntity>,
    pub corpus: Corpus,
    pub train: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
    /// Correct rewrite per record id.
    pub correct: std::collections::BTreeMap<String, String>,
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "dor", "vi", "sa", "tel", "nu", "bra", "qui", "zen", "po", "mar",
    "fi", "gal", "tor", "wen", "hu", "ly", "xo", "bel", "ri", "dan",
];

const CITIES: &[&str] = &[
    "Cusco",
    "Lima",
    "Arequipa",
    "Quito",
    "Bogota",
    "Santiago",
    "Valparaiso",
    "Montevideo",
    "Asuncion",
    "Cordoba",
    "Rosario",
    "Medellin",
    "Cali",
    "Trujillo",
    "Iquitos",
    "Salta",
    "Mendoza",
    "Sucre",
    "Potosi",
    "Oruro",
];

const FEATURES: &[&str] = &[
    "granite bridges",
    "salt caves",
    "copper domes",
    "night markets",
    "river ferries",
    "glass towers",
    "stone gardens",
    "silver mines",
    "tea houses",
    "wind mills",
    "clay ovens",
    "cable cars",
];

const QUERY_KINDS: usize = 5;

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if used.insert(w.clone()) {
            let mut c = w.chars();
            let first = c.next().unwrap().to_uppercase();
            return first.chain(c).collect();
        }
    }
}

fn entities(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<ToyEntity> {
    let mut used = BTreeSet::new();
    (0..cfg.n_entities)
        .map(|i| {
            let name = format!(
                "{} {}",
                pseudo_word(rng, &mut used),
                pseudo_word(rng, &mut used)
            );
            let owner = format!(
                "{} {}",
                pseudo_word(rng, &mut used),
                pseudo_word(rng, &mut used)
            );
            let festival = pseudo_word(rng, &mut used);
            ToyEntity {
                name,
                doc_id: format!("doc{i:03}"),
                city: CITIES.choose(rng).unwrap().to_string(),
                founded: rng.gen_range(1850..1990),
                feature: FEATURES.choose(rng).unwrap().to_string(),
                owner,
                festival,
                festival_year: rng.gen_range(1990..2024),
            }
        })
        .collect()
}

fn document(e: &ToyEntity) -> Document {
    let body = format!(
        "{n} is located in {c}. {n} was founded in {y}. {n} is known for its {f}. \
         {n} is owned by {o}. In {fy}, {n} hosted the {fe} Festival.",
        n = e.name,
        c = e.city,
        y = e.founded,
        f = e.feature,
        o = e.owner,
        fy = e.festival_year,
        fe = e.festival,
    );
    Document::new(e.doc_id.clone(), e.name.clone(), body)
}

fn recent_turn(e: &str, rng: &mut ChaCha8Rng) -> DialogueTurn {
    match rng.gen_range(0..3) {
        0 => DialogueTurn::new(
            format!("Have you been to {e}?"),
            format!("Yes, many people visit {e}."),
        ),
        1 => DialogueTurn::new(
            format!("Tell me about {e}."),
            format!("Sure, {e} is a popular place."),
        ),
        _ => DialogueTurn::new(
            format!("What do you think of {e}?"),
            format!("I think {e} is great."),
        ),
    }
}

fn older_turn(d: &str, rng: &mut ChaCha8Rng) -> DialogueTurn {
    if rng.gen_bool(0.5) {
        DialogueTurn::new(format!("Did you like {d}?"), format!("Yes, {d} was nice."))
    } else {
        DialogueTurn::new(format!("Is {d} far?"), format!("No, {d} is close."))
    }
}

/// (query, rewrite with `name` substituted, gold answer)
fn query(kind: usize, e: &ToyEntity, name: &str) -> (String, String, String) {
    match kind {
        0 => (
            "Where is it located?".into(),
            format!("Where is {name} located?"),
            format!("{} is located in {}.", e.name, e.city),
        ),
        1 => (
            "When was it founded?".into(),
            format!("When was {name} founded?"),
            format!("{} was founded in {}.", e.name, e.founded),
        ),
        2 => (
            "What is it known for?".into(),
            format!("What is {name} known for?"),
            format!("{} is known for its {}.", e.name, e.feature),
        ),
        3 => (
            "Who owns it?".into(),
            format!("Who owns {name}?"),
            format!("{} is owned by {}.", e.name, e.owner),
        ),
        _ => (
            format!("What did it host in {}?", e.festival_year),
            format!("What did {name} host in {}?", e.festival_year),
            format!(
                "In {}, {} hosted the {} Festival.",
                e.festival_year, e.name, e.festival
            ),
        ),
    }
}

fn record(
    id: String,
    ents: &[ToyEntity],
    cfg: &ToyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(QueryRecord, String)> {
    let ti = rng.gen_range(0..ents.len());
    let e = &ents[ti];
    let two_turns = rng.gen_bool(0.5);
    let mut history = vec![recent_turn(&e.name, rng)];
    if two_turns {
        let mut di = rng.gen_range(0..ents.len() - 1);
        if di >= ti {
            di += 1;
        }
        history.push(older_turn(&ents[di].name, rng));
    }
    let kind = rng.gen_range(0..QUERY_KINDS);
    let (q, correct, gold) = query(kind, e, &e.name);
    let manual = if kind == 3 && rng.gen_bool(cfg.manual_error_rate) {
        q.clone()
    } else {
        correct.clone()
    };
    let rec = QueryRecord::new(id, history, q, Some(e.doc_id.clone()), gold).with_manual(manual);
    Ok((rec, correct))
}

/// Generates the fixture deterministically from `cfg.seed`.
pub fn generate(cfg: &ToyConfig) -> Result<ToyData> {
    assert!(
        cfg.n_entities >= 2,
        "toy fixture needs at least two entities"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ents = entities(cfg, &mut rng);
    let corpus = Corpus::from_documents(ents.iter().map(document).collect())?;
    let mut correct = std::collections::BTreeMap::new();
    let mut make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<QueryRecord>> {
        (0..n)
            .map(|i| {
                let (r, c) = record(format!("{prefix}-{i:04}"), &ents, cfg, rng)?;
                correct.insert(r.record_id.clone(), c);
                Ok(r)
            })
            .collect()
    };
    let train = make("train", cfg.n_train, &mut rng)?;
    let test = make("test", cfg.n_test, &mut rng)?;
    Ok(ToyData {
        entities: ents,
        corpus,
        train,
        test,
        correct,
    })
}
