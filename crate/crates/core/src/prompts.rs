//! Prompt templates and the schema renderings that fill them.
//!
//! Templates live as plain text under `prompts/` and are compiled in. A
//! directory with files of the same names can replace any of them.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use crate::corpus::DatabaseSchema;
use crate::subset::SchemaSubset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Decomposition,
    Keywords,
    TableRetrieval,
    ColumnRetrieval,
    SqlGeneration,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Decomposition,
        TemplateKind::Keywords,
        TemplateKind::TableRetrieval,
        TemplateKind::ColumnRetrieval,
        TemplateKind::SqlGeneration,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Decomposition => "decomposition.txt",
            TemplateKind::Keywords => "keywords.txt",
            TemplateKind::TableRetrieval => "table_retrieval.txt",
            TemplateKind::ColumnRetrieval => "column_retrieval.txt",
            TemplateKind::SqlGeneration => "sql_generation.txt",
        }
    }

    /// Placeholders the template must contain.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Decomposition => &["QUESTION"],
            TemplateKind::Keywords => &["QUESTION", "EVIDENCE"],
            TemplateKind::TableRetrieval | TemplateKind::ColumnRetrieval => {
                &["SCHEMA", "AUGMENTED_QUESTION", "HINT"]
            }
            TemplateKind::SqlGeneration => &["SCHEMA", "AUGMENTED_QUESTION", "EVIDENCE"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateKind::Decomposition => include_str!("../prompts/decomposition.txt"),
            TemplateKind::Keywords => include_str!("../prompts/keywords.txt"),
            TemplateKind::TableRetrieval => include_str!("../prompts/table_retrieval.txt"),
            TemplateKind::ColumnRetrieval => include_str!("../prompts/column_retrieval.txt"),
            TemplateKind::SqlGeneration => include_str!("../prompts/sql_generation.txt"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {file} lacks the {{{slot}}} placeholder")]
    MissingSlot { file: String, slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: [String; 5],
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: TemplateKind::ALL.map(|k| k.builtin().to_string()),
        }
    }
}

impl PromptSet {
    /// Built-in templates, with any file present in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        for (i, kind) in TemplateKind::ALL.into_iter().enumerate() {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            for slot in kind.slots() {
                if !text.contains(&format!("{{{slot}}}")) {
                    return Err(PromptError::MissingSlot {
                        file: path.display().to_string(),
                        slot: slot.to_string(),
                    });
                }
            }
            set.templates[i] = text;
        }
        Ok(set)
    }

    pub fn template(&self, kind: TemplateKind) -> &str {
        let i = TemplateKind::ALL.iter().position(|k| *k == kind).expect("known kind");
        &self.templates[i]
    }

    pub fn render(&self, kind: TemplateKind, slots: &[(&str, &str)]) -> String {
        render(self.template(kind), slots)
    }
}

/// Substitutes `{NAME}` placeholders in one pass, so slot values that
/// happen to contain placeholder text are left alone. Braces that do not
/// name a supplied slot are copied through.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let hit = slots.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail[1 + name.len()..].starts_with('}')
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Retrieval-prompt schema: the `{table: [columns]}` object followed by a
/// parallel `{table: {column: [samples]}}` object for the same subset.
pub fn retrieval_schema(schema: &DatabaseSchema, subset: &SchemaSubset) -> String {
    let mut samples: IndexMap<&str, IndexMap<&str, &[String]>> = IndexMap::new();
    for (table, cols) in subset.iter() {
        let Some(def) = schema.table(table) else { continue };
        let per_table = samples.entry(table).or_default();
        for col in cols {
            if let Some(c) = def.column(col) {
                if !c.samples.is_empty() {
                    per_table.insert(col, &c.samples);
                }
            }
        }
    }
    samples.retain(|_, v| !v.is_empty());
    format!(
        "{}\nSample values: {}",
        subset.to_json(),
        serde_json::to_string(&samples).expect("samples serialize")
    )
}

/// Generation-prompt schema: per table, each column with its declared type
/// and samples, plus the key constraints that stay inside the subset.
pub fn generation_schema(schema: &DatabaseSchema, subset: &SchemaSubset) -> String {
    let mut root = Map::new();
    for (table, cols) in subset.iter() {
        let Some(def) = schema.table(table) else { continue };
        let mut columns = Map::new();
        for col in &cols {
            let Some(c) = def.column(col) else { continue };
            let mut info = Map::new();
            info.insert("type".into(), json!(c.declared_type));
            if !c.samples.is_empty() {
                info.insert("examples".into(), json!(c.samples));
            }
            columns.insert(c.name.clone(), Value::Object(info));
        }
        let pk: Vec<&str> = def
            .primary_key
            .iter()
            .filter(|k| subset.contains(table, k))
            .map(String::as_str)
            .collect();
        let fks: Vec<String> = def
            .foreign_keys
            .iter()
            .filter(|fk| {
                subset.contains(table, &fk.column) && subset.contains_table(&fk.foreign_table)
            })
            .map(|fk| format!("{}.{} -> {}.{}", def.name, fk.column, fk.foreign_table, fk.foreign_column))
            .collect();
        let mut entry = Map::new();
        entry.insert("columns".into(), Value::Object(columns));
        if !pk.is_empty() {
            entry.insert("primary_key".into(), json!(pk));
        }
        if !fks.is_empty() {
            entry.insert("foreign_keys".into(), json!(fks));
        }
        root.insert(def.name.clone(), Value::Object(entry));
    }
    serde_json::to_string(&Value::Object(root)).expect("schema serializes")
}
