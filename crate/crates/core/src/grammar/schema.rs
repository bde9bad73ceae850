use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Extraction task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "EE")]
    Ee,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "NER",
            Task::Re => "RE",
            Task::Ee => "EE",
        })
    }
}

impl FromStr for Task {
    type Err = SchemaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NER" | "ner" => Ok(Task::Ner),
            "RE" | "re" => Ok(Task::Re),
            "EE" | "ee" => Ok(Task::Ee),
            other => Err(SchemaError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema must declare at least one label")]
    NoLabels,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("label or role {0:?} is empty or contains a quote, backslash or control character")]
    BadName(String),
    #[error("roles are only allowed for EE schemas")]
    RolesOutsideEe,
    #[error("role map key {0:?} is not a schema label")]
    UnknownRoleKey(String),
    #[error("at most {max} labels are supported, got {got}")]
    TooManyLabels { max: usize, got: usize },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid schema file: {0}")]
    Invalid(String),
}

pub const MAX_LABELS: usize = 64;

/// Task description: which labels (and, for EE, which roles) may be emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub task: Task,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub roles: BTreeMap<String, Vec<String>>,
}

pub(crate) fn is_safe_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c == '"' || c == '\\' || c.is_control())
}

impl Schema {
    pub fn new(
        task: Task,
        labels: impl IntoIterator<Item = impl Into<String>>,
        roles: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, SchemaError> {
        let s = Self { task, labels: labels.into_iter().map(Into::into).collect(), roles };
        s.validate()?;
        Ok(s)
    }

    pub fn ner(labels: &[&str]) -> Result<Self, SchemaError> {
        Self::new(Task::Ner, labels.iter().copied(), BTreeMap::new())
    }

    pub fn re(labels: &[&str]) -> Result<Self, SchemaError> {
        Self::new(Task::Re, labels.iter().copied(), BTreeMap::new())
    }

    pub fn ee(events: &[(&str, &[&str])]) -> Result<Self, SchemaError> {
        let roles = events
            .iter()
            .map(|(e, rs)| (e.to_string(), rs.iter().map(|r| r.to_string()).collect()))
            .collect();
        Self::new(Task::Ee, events.iter().map(|(e, _)| *e), roles)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.labels.is_empty() {
            return Err(SchemaError::NoLabels);
        }
        if self.labels.len() > MAX_LABELS {
            return Err(SchemaError::TooManyLabels { max: MAX_LABELS, got: self.labels.len() });
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !is_safe_name(l) {
                return Err(SchemaError::BadName(l.clone()));
            }
            if !seen.insert(l.as_str()) {
                return Err(SchemaError::DuplicateLabel(l.clone()));
            }
        }
        if self.task != Task::Ee && !self.roles.is_empty() {
            return Err(SchemaError::RolesOutsideEe);
        }
        for (k, rs) in &self.roles {
            if !seen.contains(k.as_str()) {
                return Err(SchemaError::UnknownRoleKey(k.clone()));
            }
            let mut rseen = HashSet::new();
            for r in rs {
                if !is_safe_name(r) {
                    return Err(SchemaError::BadName(r.clone()));
                }
                if !rseen.insert(r.as_str()) {
                    return Err(SchemaError::DuplicateLabel(r.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Roles of an event type; empty when none are declared.
    pub fn roles_of(&self, label: &str) -> &[String] {
        self.roles.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let s: Schema =
            serde_json::from_str(text).map_err(|e| SchemaError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_schema_file_layout() {
        let s = Schema::from_json(r#"{"task": "NER", "labels": ["Person", "Location"]}"#).unwrap();
        assert_eq!(s.task, Task::Ner);
        assert_eq!(s.labels, vec!["Person", "Location"]);

        let s = Schema::from_json(
            r#"{"task": "EE", "labels": ["Attack"], "roles": {"Attack": ["attacker", "target"]}}"#,
        )
        .unwrap();
        assert_eq!(s.roles_of("Attack"), &["attacker".to_string(), "target".to_string()]);
        assert!(s.roles_of("Other").is_empty());
        assert_eq!(Schema::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_schemas() {
        assert_eq!(Schema::ner(&[]).unwrap_err(), SchemaError::NoLabels);
        assert_eq!(Schema::ner(&["A", "A"]).unwrap_err(), SchemaError::DuplicateLabel("A".into()));
        assert_eq!(Schema::ner(&["a\"b"]).unwrap_err(), SchemaError::BadName("a\"b".into()));
        assert_eq!(
            Schema::ee(&[("Attack", &["x"])]).map(|mut s| {
                s.roles.insert("Nope".into(), vec![]);
                s.validate()
            }),
            Ok(Err(SchemaError::UnknownRoleKey("Nope".into())))
        );
        let err = Schema::from_json(r#"{"task": "RE", "labels": ["r"], "roles": {"r": []}}"#);
        assert_eq!(err.unwrap_err(), SchemaError::RolesOutsideEe);
        assert!(matches!(
            Schema::from_json(r#"{"task": "XX", "labels": ["r"]}"#),
            Err(SchemaError::Invalid(_))
        ));
    }
}
