//! Line-delimited JSON corpora, schema files and prediction dumps.
//!
//! One record per line:
//!
//! ```text
//! {"tokens":["Rome","is","nice"],"entities":[[0,0,"LOC"]],"relations":[]}
//! ```
//!
//! Relations are `[[hs,he,"htype"],[ts,te,"ttype"],"rtype"]` with inclusive
//! 0-based indices. Prediction dumps may add `entity_scores` and
//! `relation_scores`, aligned with `entities` and `relations`.

use std::fs;
use std::path::Path;

use care_core::decode::Prediction;
use care_core::{AnnotatedSentence, EntityMention, RelationTriplet, Schema, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Failure, Result};

type RawMention = (usize, usize, String);
type RawTriplet = (RawMention, RawMention, String);

#[derive(Debug, Serialize)]
struct RawRecord<'a> {
    tokens: &'a [String],
    entities: Vec<RawMention>,
    relations: Vec<RawTriplet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity_scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relation_scores: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

const FIELDS: &[&str] = &["tokens", "entities", "relations", "entity_scores", "relation_scores"];

fn field<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, name: &str, line: usize, required: bool) -> Result<Option<T>> {
    match obj.remove(name) {
        None if required => Err(Failure::Data(format!("line {line}: missing field `{name}`"))),
        None => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| Failure::Data(format!("line {line}: field `{name}`: {e}"))),
    }
}

fn mention(schema: &Schema, raw: &RawMention, line: usize, field: &str) -> Result<EntityMention> {
    let label = schema
        .entity_index(&raw.2)
        .map_err(|e| Failure::Data(format!("line {line}: field `{field}`: {e}")))?;
    Ok(EntityMention::new(raw.0, raw.1, label))
}

/// Parses one record. `line` is 1-based and only used in messages.
pub fn parse_record(text: &str, schema: &Schema, line: usize) -> Result<AnnotatedSentence> {
    let value: Value = serde_json::from_str(text).map_err(|e| Failure::Data(format!("line {line}: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(Failure::Data(format!("line {line}: record must be a JSON object")));
    };
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(Failure::Data(format!("line {line}: unknown field `{k}`")));
    }
    let tokens: Vec<String> = field(&mut obj, "tokens", line, true)?.unwrap_or_default();
    let raw_entities: Vec<RawMention> = field(&mut obj, "entities", line, true)?.unwrap_or_default();
    let raw_relations: Vec<RawTriplet> = field(&mut obj, "relations", line, true)?.unwrap_or_default();
    for (name, expected) in [("entity_scores", raw_entities.len()), ("relation_scores", raw_relations.len())] {
        if let Some(scores) = field::<Vec<f64>>(&mut obj, name, line, false)? {
            if scores.len() != expected {
                return Err(Failure::Data(format!(
                    "line {line}: field `{name}`: {} scores for {expected} items",
                    scores.len()
                )));
            }
        }
    }
    let entities = raw_entities
        .iter()
        .map(|m| mention(schema, m, line, "entities"))
        .collect::<Result<Vec<_>>>()?;
    let relations = raw_relations
        .iter()
        .map(|(h, t, r)| {
            Ok(RelationTriplet {
                head: mention(schema, h, line, "relations")?,
                tail: mention(schema, t, line, "relations")?,
                label: schema
                    .relation_index(r)
                    .map_err(|e| Failure::Data(format!("line {line}: field `relations`: {e}")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sentence = AnnotatedSentence::new(tokens, entities, relations);
    sentence.line = Some(line);
    sentence
        .validate(schema)
        .map_err(|e| Failure::Data(format!("line {line}: {e}")))?;
    Ok(sentence)
}

/// Parses a whole corpus; blank lines are skipped.
pub fn parse_corpus(text: &str, schema: &Schema) -> Result<Vec<AnnotatedSentence>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, schema, i + 1))
        .collect()
}

pub fn load_corpus(path: &Path, schema: &Schema) -> Result<Vec<AnnotatedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    parse_corpus(&text, schema).map_err(|e| match e {
        Failure::Data(msg) => Failure::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn raw_mention(schema: &Schema, m: &EntityMention) -> RawMention {
    (m.start, m.end, schema.entity_types()[m.label].clone())
}

fn raw_triplets<'a>(schema: &Schema, ts: impl Iterator<Item = &'a RelationTriplet>) -> Vec<RawTriplet> {
    ts.map(|t| {
        (
            raw_mention(schema, &t.head),
            raw_mention(schema, &t.tail),
            schema.relation_types()[t.label].clone(),
        )
    })
    .collect()
}

/// Compact single-line record in field order tokens, entities, relations.
pub fn serialize_record(sentence: &AnnotatedSentence, schema: &Schema) -> String {
    let rec = RawRecord {
        tokens: &sentence.tokens,
        entities: sentence.entities.iter().map(|m| raw_mention(schema, m)).collect(),
        relations: raw_triplets(schema, sentence.relations.iter()),
        entity_scores: None,
        relation_scores: None,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn serialize_corpus(sentences: &[AnnotatedSentence], schema: &Schema) -> String {
    sentences.iter().map(|s| serialize_record(s, schema) + "\n").collect()
}

/// Dump record for a decoded sentence. With tables, each mention and
/// triplet carries the probability of its cell.
pub fn serialize_prediction(
    tokens: &[String],
    pred: &Prediction,
    schema: &Schema,
    tables: Option<(&Tensor, &Tensor)>,
) -> String {
    let (entity_scores, relation_scores) = match tables {
        Some((e, r)) => (
            Some(pred.mentions.iter().map(|m| e.at(&[m.start, m.end, m.label])).collect()),
            Some(
                pred.triplets
                    .iter()
                    .map(|t| r.at(&[t.head.end, t.tail.end, t.label]))
                    .collect(),
            ),
        ),
        None => (None, None),
    };
    let rec = RawRecord {
        tokens,
        entities: pred.mentions.iter().map(|m| raw_mention(schema, m)).collect(),
        relations: raw_triplets(schema, pred.triplets.iter()),
        entity_scores,
        relation_scores,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn parse_schema(text: &str) -> Result<Schema> {
    let raw: SchemaFile = serde_json::from_str(text).map_err(|e| Failure::Data(format!("schema: {e}")))?;
    Ok(Schema::new(raw.entity_types, raw.relation_types)?)
}

pub fn serialize_schema(schema: &Schema) -> String {
    let raw = SchemaFile {
        entity_types: schema.entity_types().to_vec(),
        relation_types: schema.relation_types().to_vec(),
    };
    serde_json::to_string_pretty(&raw).expect("schema serializes") + "\n"
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    parse_schema(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}
