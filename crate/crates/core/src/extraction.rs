//! Structured extraction results in the canonical JSON shapes.
//!
//! Parsing is whitespace tolerant and accepts RE/EE keys in any order.
//! Rendering always produces the whitespace-free canonical form that the
//! grammar automaton generates.

use serde_json::{Map, Value};

use crate::grammar::{keys, Schema, Task};

/// One NER object: ordered `(label, spans)` entries with unique labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerObject(pub Vec<(String, Vec<String>)>);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation {
    pub relation: String,
    pub subject: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub event_type: String,
    pub trigger: String,
    /// `(role, span)` pairs.
    pub arguments: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extraction {
    Ner(Vec<NerObject>),
    Re(Vec<Relation>),
    Ee(Vec<Event>),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("wrong shape for {task}: {detail}")]
    Shape { task: Task, detail: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("unknown role {role:?} for event type {event_type:?}")]
    UnknownRole { event_type: String, role: String },
    #[error("empty span")]
    EmptySpan,
}

fn shape(task: Task, detail: impl Into<String>) -> ParseError {
    ParseError::Shape { task, detail: detail.into() }
}

fn as_str(task: Task, v: &Value, what: &str) -> Result<String, ParseError> {
    v.as_str().map(str::to_string).ok_or_else(|| shape(task, format!("{what} must be a string")))
}

fn span(task: Task, v: &Value, what: &str) -> Result<String, ParseError> {
    let s = as_str(task, v, what)?;
    if s.is_empty() {
        return Err(ParseError::EmptySpan);
    }
    Ok(s)
}

fn object_with_keys<'a>(
    task: Task,
    v: &'a Value,
    expected: &[&str],
) -> Result<&'a Map<String, Value>, ParseError> {
    let obj = v.as_object().ok_or_else(|| shape(task, "items must be objects"))?;
    if obj.len() != expected.len() || !expected.iter().all(|k| obj.contains_key(*k)) {
        let got: Vec<&str> = obj.keys().map(String::as_str).collect();
        return Err(shape(task, format!("expected keys {expected:?}, got {got:?}")));
    }
    Ok(obj)
}

impl Extraction {
    pub fn task(&self) -> Task {
        match self {
            Extraction::Ner(_) => Task::Ner,
            Extraction::Re(_) => Task::Re,
            Extraction::Ee(_) => Task::Ee,
        }
    }

    pub fn empty(task: Task) -> Self {
        match task {
            Task::Ner => Extraction::Ner(Vec::new()),
            Task::Re => Extraction::Re(Vec::new()),
            Task::Ee => Extraction::Ee(Vec::new()),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Extraction::Ner(v) => v.is_empty(),
            Extraction::Re(v) => v.is_empty(),
            Extraction::Ee(v) => v.is_empty(),
        }
    }

    /// Parses and checks labels and roles against `schema`.
    pub fn parse(text: &str, schema: &Schema) -> Result<Self, ParseError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ParseError::Malformed(e.to_string()))?;
        let task = schema.task;
        let items = value.as_array().ok_or_else(|| shape(task, "top level must be an array"))?;
        let label = |l: String| -> Result<String, ParseError> {
            match schema.label_index(&l) {
                Some(_) => Ok(l),
                None => Err(ParseError::UnknownLabel(l)),
            }
        };
        match task {
            Task::Ner => {
                let mut objects = Vec::with_capacity(items.len());
                for item in items {
                    let obj = item.as_object().ok_or_else(|| shape(task, "items must be objects"))?;
                    if obj.is_empty() {
                        return Err(shape(task, "objects must carry at least one label"));
                    }
                    let mut entries = Vec::with_capacity(obj.len());
                    for (k, v) in obj {
                        let list = v
                            .as_array()
                            .ok_or_else(|| shape(task, format!("value of {k:?} must be an array")))?;
                        if list.is_empty() {
                            return Err(shape(task, format!("span list of {k:?} is empty")));
                        }
                        let spans =
                            list.iter().map(|s| span(task, s, "span")).collect::<Result<_, _>>()?;
                        entries.push((label(k.clone())?, spans));
                    }
                    objects.push(NerObject(entries));
                }
                Ok(Extraction::Ner(objects))
            }
            Task::Re => {
                let expected = [keys::RELATION, keys::SUBJECT, keys::OBJECT];
                let rels = items
                    .iter()
                    .map(|item| {
                        let obj = object_with_keys(task, item, &expected)?;
                        Ok(Relation {
                            relation: label(as_str(task, &obj[keys::RELATION], keys::RELATION)?)?,
                            subject: span(task, &obj[keys::SUBJECT], keys::SUBJECT)?,
                            object: span(task, &obj[keys::OBJECT], keys::OBJECT)?,
                        })
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Extraction::Re(rels))
            }
            Task::Ee => {
                let expected = [keys::EVENT_TYPE, keys::TRIGGER, keys::ARGUMENTS];
                let arg_keys = [keys::ROLE, keys::SPAN];
                let events = items
                    .iter()
                    .map(|item| {
                        let obj = object_with_keys(task, item, &expected)?;
                        let event_type =
                            label(as_str(task, &obj[keys::EVENT_TYPE], keys::EVENT_TYPE)?)?;
                        let trigger = span(task, &obj[keys::TRIGGER], keys::TRIGGER)?;
                        let args = obj[keys::ARGUMENTS]
                            .as_array()
                            .ok_or_else(|| shape(task, "arguments must be an array"))?;
                        let roles = schema.roles_of(&event_type);
                        let arguments = args
                            .iter()
                            .map(|a| {
                                let a = object_with_keys(task, a, &arg_keys)?;
                                let role = as_str(task, &a[keys::ROLE], keys::ROLE)?;
                                if !roles.contains(&role) {
                                    return Err(ParseError::UnknownRole {
                                        event_type: event_type.clone(),
                                        role,
                                    });
                                }
                                Ok((role, span(task, &a[keys::SPAN], keys::SPAN)?))
                            })
                            .collect::<Result<_, _>>()?;
                        Ok(Event { event_type, trigger, arguments })
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Extraction::Ee(events))
            }
        }
    }

    /// Whitespace-free canonical rendering.
    pub fn render(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).expect("string serializes");
        let mut out = String::from("[");
        match self {
            Extraction::Ner(objects) => {
                for (i, NerObject(entries)) in objects.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('{');
                    for (j, (label, spans)) in entries.iter().enumerate() {
                        if j > 0 {
                            out.push(',');
                        }
                        out.push_str(&q(label));
                        out.push_str(":[");
                        let spans: Vec<String> = spans.iter().map(|s| q(s)).collect();
                        out.push_str(&spans.join(","));
                        out.push(']');
                    }
                    out.push('}');
                }
            }
            Extraction::Re(rels) => {
                let items: Vec<String> = rels
                    .iter()
                    .map(|r| {
                        format!(
                            "{{\"{}\":{},\"{}\":{},\"{}\":{}}}",
                            keys::RELATION,
                            q(&r.relation),
                            keys::SUBJECT,
                            q(&r.subject),
                            keys::OBJECT,
                            q(&r.object)
                        )
                    })
                    .collect();
                out.push_str(&items.join(","));
            }
            Extraction::Ee(events) => {
                let items: Vec<String> = events
                    .iter()
                    .map(|e| {
                        let args: Vec<String> = e
                            .arguments
                            .iter()
                            .map(|(r, s)| {
                                format!("{{\"{}\":{},\"{}\":{}}}", keys::ROLE, q(r), keys::SPAN, q(s))
                            })
                            .collect();
                        format!(
                            "{{\"{}\":{},\"{}\":{},\"{}\":[{}]}}",
                            keys::EVENT_TYPE,
                            q(&e.event_type),
                            keys::TRIGGER,
                            q(&e.trigger),
                            keys::ARGUMENTS,
                            args.join(",")
                        )
                    })
                    .collect();
                out.push_str(&items.join(","));
            }
        }
        out.push(']');
        out
    }

    /// Every extracted span string, in document order.
    pub fn spans(&self) -> Vec<&str> {
        match self {
            Extraction::Ner(objects) => objects
                .iter()
                .flat_map(|o| o.0.iter().flat_map(|(_, s)| s.iter().map(String::as_str)))
                .collect(),
            Extraction::Re(rels) => {
                rels.iter().flat_map(|r| [r.subject.as_str(), r.object.as_str()]).collect()
            }
            Extraction::Ee(events) => events
                .iter()
                .flat_map(|e| {
                    std::iter::once(e.trigger.as_str())
                        .chain(e.arguments.iter().map(|(_, s)| s.as_str()))
                })
                .collect(),
        }
    }
}
