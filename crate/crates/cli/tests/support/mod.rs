//! Fixture builders shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use serde_json::{json, Value};

use docsynth::gateway::{GatewayError, GenerationParams};
use docsynth::markup;
use docsynth::model::{AnnotationRecord, Entity, Mention, SourceDocument, Span, Triple};

pub fn sample_record_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/sample_record.json")
}

/// An entity with every surface form that should be tagged.
pub struct EntitySpec<'a> {
    pub id: u64,
    pub name: &'a str,
    pub type_label: &'a str,
    pub surfaces: Vec<&'a str>,
}

/// Tags every non-overlapping occurrence of each surface, in entity order.
pub fn mentions_for(text: &str, entities: &[EntitySpec<'_>]) -> Vec<Mention> {
    let mut mentions: Vec<Mention> = Vec::new();
    for e in entities {
        for surface in &e.surfaces {
            for (byte, _) in text.match_indices(surface) {
                let start = text[..byte].chars().count();
                let span = Span::new(start, start + surface.chars().count());
                if mentions.iter().any(|m| m.span.overlaps(&span)) {
                    continue;
                }
                mentions.push(Mention {
                    entity_id: e.id,
                    span,
                    surface: surface.to_string(),
                    type_label: e.type_label.to_string(),
                });
            }
        }
    }
    mentions.sort_by_key(|m| m.span.start);
    mentions
}

pub fn entities_of(entities: &[EntitySpec<'_>]) -> Vec<Entity> {
    entities
        .iter()
        .map(|e| Entity {
            id: e.id,
            name: e.name.to_string(),
            type_label: e.type_label.to_string(),
        })
        .collect()
}

pub fn triples_of(entities: &[EntitySpec<'_>], triples: &[(u64, &str, u64)]) -> Vec<Triple> {
    let name = |id: u64| entities.iter().find(|e| e.id == id).map_or("?", |e| e.name);
    triples
        .iter()
        .map(|&(s, p, o)| Triple {
            description: format!("{} {} {}.", name(s), p.replace('_', " "), name(o)),
            triple_string: format!("({}, {}, {})", name(s), p, name(o)),
            subject: s,
            predicate: p.to_string(),
            object: o,
        })
        .collect()
}

/// A zero-shot style response object that passes verification for `text`.
pub fn zero_shot_response(text: &str, entities: &[EntitySpec<'_>], triples: &[(u64, &str, u64)]) -> Value {
    let mentions = mentions_for(text, entities);
    let annotated = markup::render_annotated(text, &mentions).expect("fixture renders");
    let ents = entities_of(entities);
    let trips = triples_of(entities, triples);
    let mut entity_types: Vec<&str> = Vec::new();
    for e in entities {
        if !entity_types.contains(&e.type_label) {
            entity_types.push(e.type_label);
        }
    }
    let mut relation_types: Vec<&str> = Vec::new();
    for t in triples {
        if !relation_types.contains(&t.1) {
            relation_types.push(t.1);
        }
    }
    json!({
        "text_with_spans": annotated,
        "entities": ents,
        "triples": trips,
        "relation_types": relation_types,
        "entity_types": entity_types,
    })
}

pub fn record_from(doc_id: &str, text: &str, entities: &[EntitySpec<'_>], triples: &[(u64, &str, u64)]) -> AnnotationRecord {
    let mentions = mentions_for(text, entities);
    let annotated = markup::render_annotated(text, &mentions).expect("fixture renders");
    AnnotationRecord::from_parts(doc_id, text, annotated, entities_of(entities), triples_of(entities, triples))
        .expect("fixture record is valid")
}

const PERSONS: [&str; 10] = [
    "Ann Lee", "Bo Chen", "Cara Diaz", "Dev Patel", "Eli Stone", "Fay Wong", "Gus Hale", "Ida Moss", "Jon Park", "Kim Roy",
];
const ORGS: [&str; 5] = ["Acme Labs", "Birch Works", "Cobalt Group", "Delta Mills", "Ember Foundry"];
const CITIES: [&str; 7] = ["Graz", "Lyon", "Porto", "Turku", "Leeds", "Basel", "Ghent"];

/// A small synthetic document with four entities and three triples.
pub struct SyntheticDoc {
    pub id: String,
    pub text: String,
    pub person: &'static str,
    pub org: &'static str,
    pub city: &'static str,
    pub visitor: &'static str,
}

impl SyntheticDoc {
    pub fn new(i: usize) -> Self {
        let person = PERSONS[i % PERSONS.len()];
        let visitor = PERSONS[(i + 3) % PERSONS.len()];
        let org = ORGS[i % ORGS.len()];
        let city = CITIES[i % CITIES.len()];
        let text = format!(
            "{person} joined {org} in {city} during spring number {i}. Later {visitor} visited {city} and praised {org}. The team at {org} grew quickly."
        );
        SyntheticDoc {
            id: format!("doc{i:03}"),
            text,
            person,
            org,
            city,
            visitor,
        }
    }

    pub fn entities(&self) -> Vec<EntitySpec<'static>> {
        vec![
            EntitySpec { id: 0, name: self.person, type_label: "Person", surfaces: vec![self.person] },
            EntitySpec { id: 1, name: self.org, type_label: "Organization", surfaces: vec![self.org] },
            EntitySpec { id: 2, name: self.city, type_label: "City", surfaces: vec![self.city] },
            EntitySpec { id: 3, name: self.visitor, type_label: "Person", surfaces: vec![self.visitor] },
        ]
    }

    pub const TRIPLES: [(u64, &'static str, u64); 3] = [(0, "works_for", 1), (1, "located_in", 2), (3, "visited", 2)];

    pub fn response(&self) -> Value {
        zero_shot_response(&self.text, &self.entities(), &Self::TRIPLES)
    }

    pub fn record(&self) -> AnnotationRecord {
        record_from(&self.id, &self.text, &self.entities(), &Self::TRIPLES)
    }

    pub fn source(&self) -> SourceDocument {
        SourceDocument::new(self.id.clone(), self.text.clone()).unwrap()
    }
}

/// A scripted model keyed by a substring of the prompt and the temperature.
pub struct Script {
    pub rules: Vec<(String, Option<f64>, String)>,
}

impl Script {
    pub fn answer(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        self.rules
            .iter()
            .find(|(needle, temp, _)| prompt.contains(needle.as_str()) && temp.is_none_or(|t| t == params.temperature))
            .map(|(_, _, r)| r.clone())
            .ok_or_else(|| GatewayError::Transport(format!("no scripted answer for prompt of {} chars", prompt.len())))
    }
}

pub fn json_escaped(text: &str) -> String {
    let quoted = serde_json::to_string(text).unwrap();
    quoted[1..quoted.len() - 1].to_string()
}

pub fn count_by<T, K: std::hash::Hash + Eq>(items: &[T], key: impl Fn(&T) -> K) -> HashMap<K, usize> {
    let mut out = HashMap::new();
    for item in items {
        *out.entry(key(item)).or_default() += 1;
    }
    out
}
