//! Bidirectional schema linking: table-first and column-first retrieval,
//! merged by union.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{AugmentedQuestion, Degradation};
use crate::backend::{parse_json_object, Session};
use crate::corpus::DatabaseSchema;
use crate::prompts::{retrieval_schema, PromptSet, TemplateKind};
use crate::subset::{subset_union, SchemaSubset};

pub const TAG_TF_TABLES: &str = "tf_tables";
pub const TAG_TF_COLUMNS: &str = "tf_columns";
pub const TAG_CF_COLUMNS: &str = "cf_columns";
pub const TAG_CF_TABLES: &str = "cf_tables";

const REASONING_KEY: &str = "chain of thought reasoning";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Column-level union of the two paths.
    #[default]
    ColumnUnion,
    /// Every column of each table-first table, plus the column-first pairs.
    TableExpand,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkOptions {
    pub merge_mode: MergeMode,
    /// Add primary and foreign key columns of every merged table.
    pub force_keys: bool,
}

/// A table or column named by the model that the schema (or the view shown
/// to the model) does not contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hallucination {
    pub stage: String,
    pub table: String,
    pub column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingResult {
    pub table_first: SchemaSubset,
    pub column_first: SchemaSubset,
    pub merged: SchemaSubset,
    pub dropped_hallucinations: Vec<Hallucination>,
    pub degradation_events: Vec<Degradation>,
}

#[derive(Debug, Default)]
pub struct LinkLog {
    pub dropped: Vec<Hallucination>,
    pub events: Vec<Degradation>,
}

/// Table → columns as the model wrote it. Column lists may be empty.
type Selection = Vec<(String, Vec<String>)>;

/// Keys whose values are lists are table selections; the reasoning entry
/// and anything else is ignored. `None` when the reply holds no object.
fn parse_selection(text: &str) -> Option<Selection> {
    let v = parse_json_object(text).ok()?;
    let obj = v.as_object()?;
    Some(
        obj.iter()
            .filter(|(k, _)| !k.trim().eq_ignore_ascii_case(REASONING_KEY))
            .filter_map(|(k, v)| {
                let cols = v.as_array()?;
                let cols = cols
                    .iter()
                    .filter_map(Value::as_str)
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
                Some((k.trim().to_string(), cols))
            })
            .collect(),
    )
}

/// Splits a selection into what `allowed` contains and what it does not.
/// Tables selected with no columns are returned separately.
fn screen(
    sel: &Selection,
    allowed: &SchemaSubset,
    stage: &str,
    log: &mut LinkLog,
) -> (SchemaSubset, Vec<String>) {
    let mut kept = SchemaSubset::new();
    let mut bare = Vec::new();
    for (table, cols) in sel {
        if !allowed.contains_table(table) {
            log.dropped.push(Hallucination {
                stage: stage.into(),
                table: table.clone(),
                column: None,
            });
            continue;
        }
        if cols.is_empty() {
            bare.push(table.clone());
        }
        for col in cols {
            if allowed.contains(table, col) {
                kept.insert(table, col);
            } else {
                log.dropped.push(Hallucination {
                    stage: stage.into(),
                    table: table.clone(),
                    column: Some(col.clone()),
                });
            }
        }
    }
    (kept, bare)
}

fn retrieval_prompt(
    prompts: &PromptSet,
    kind: TemplateKind,
    schema_text: &str,
    aug: &AugmentedQuestion,
) -> String {
    let aq = aug.prompt_json();
    prompts.render(kind, &[("SCHEMA", schema_text), ("AUGMENTED_QUESTION", &aq), ("HINT", &aug.hint)])
}

/// All columns of the named tables, in schema order.
fn expand_tables<'a>(
    schema: &DatabaseSchema,
    tables: impl IntoIterator<Item = &'a str>,
) -> SchemaSubset {
    let mut out = SchemaSubset::new();
    for t in tables {
        if let Some(def) = schema.table(t) {
            out.insert_all(t, def.columns.iter().map(|c| c.name.as_str()));
        }
    }
    out
}

/// Filter tables, then select columns within them.
pub fn table_first(
    schema: &DatabaseSchema,
    aug: &AugmentedQuestion,
    session: &mut Session<'_>,
    prompts: &PromptSet,
    log: &mut LinkLog,
) -> SchemaSubset {
    let full = schema.full_subset();
    let prompt = retrieval_prompt(
        prompts,
        TemplateKind::TableRetrieval,
        &retrieval_schema(schema, &full),
        aug,
    );
    let reply = session.complete_parsed(TAG_TF_TABLES, &prompt, parse_selection);
    let tables: Vec<String> = match reply {
        Ok(sel) => sel
            .iter()
            .filter_map(|(t, _)| {
                if schema.table(t).is_some() {
                    Some(t.clone())
                } else {
                    log.dropped.push(Hallucination {
                        stage: TAG_TF_TABLES.into(),
                        table: t.clone(),
                        column: None,
                    });
                    None
                }
            })
            .collect(),
        Err(e) => {
            log.events.push(Degradation::new(TAG_TF_TABLES, &e));
            Vec::new()
        }
    };
    let view = if tables.is_empty() {
        if !log.events.iter().any(|d| d.stage == TAG_TF_TABLES) {
            log.events.push(Degradation::new(TAG_TF_TABLES, "no known table selected"));
        }
        full
    } else {
        expand_tables(schema, tables.iter().map(String::as_str))
    };

    let prompt = retrieval_prompt(
        prompts,
        TemplateKind::ColumnRetrieval,
        &retrieval_schema(schema, &view),
        aug,
    );
    match session.complete_parsed(TAG_TF_COLUMNS, &prompt, parse_selection) {
        Ok(sel) => {
            let (kept, _) = screen(&sel, &view, TAG_TF_COLUMNS, log);
            if kept.is_empty() {
                log.events.push(Degradation::new(TAG_TF_COLUMNS, "no known column selected"));
                view
            } else {
                kept
            }
        }
        Err(e) => {
            log.events.push(Degradation::new(TAG_TF_COLUMNS, &e));
            view
        }
    }
}

/// Filter columns, then decide which tables they belong in. Every parent
/// table of a selected column is kept.
pub fn column_first(
    schema: &DatabaseSchema,
    aug: &AugmentedQuestion,
    session: &mut Session<'_>,
    prompts: &PromptSet,
    log: &mut LinkLog,
) -> SchemaSubset {
    let full = schema.full_subset();
    let prompt = retrieval_prompt(
        prompts,
        TemplateKind::ColumnRetrieval,
        &retrieval_schema(schema, &full),
        aug,
    );
    let candidates = match session.complete_parsed(TAG_CF_COLUMNS, &prompt, parse_selection) {
        Ok(sel) => {
            let (kept, _) = screen(&sel, &full, TAG_CF_COLUMNS, log);
            if kept.is_empty() {
                log.events.push(Degradation::new(TAG_CF_COLUMNS, "no known column selected"));
                full.clone()
            } else {
                kept
            }
        }
        Err(e) => {
            log.events.push(Degradation::new(TAG_CF_COLUMNS, &e));
            full.clone()
        }
    };

    // Second call sees the candidate columns and the names of all tables.
    let all_tables: Vec<&str> = schema.tables.iter().map(|t| t.name.as_str()).collect();
    let schema_text = format!(
        "{}\nAll tables: {}",
        retrieval_schema(schema, &candidates),
        serde_json::to_string(&all_tables).expect("names serialize")
    );
    let prompt = retrieval_prompt(prompts, TemplateKind::TableRetrieval, &schema_text, aug);
    let chosen = match session.complete_parsed(TAG_CF_TABLES, &prompt, parse_selection) {
        Ok(sel) => {
            let (mut kept, bare) = screen(&sel, &full, TAG_CF_TABLES, log);
            for t in bare {
                let def = schema.table(&t).expect("screened table exists");
                kept.insert_all(&t, def.key_columns());
            }
            kept
        }
        Err(e) => {
            log.events.push(Degradation::new(TAG_CF_TABLES, &e));
            SchemaSubset::new()
        }
    };
    subset_union(&chosen, &candidates)
}

/// Adds primary and foreign key columns of every table in `s`.
fn with_keys(schema: &DatabaseSchema, s: &SchemaSubset) -> SchemaSubset {
    let mut out = s.clone();
    for table in s.table_names() {
        if let Some(def) = schema.table(table) {
            out.insert_all(table, def.primary_key.iter().map(String::as_str));
            out.insert_all(table, def.foreign_keys.iter().map(|fk| fk.column.as_str()));
        }
    }
    out
}

pub fn merge(
    schema: &DatabaseSchema,
    table_first: &SchemaSubset,
    column_first: &SchemaSubset,
    opts: LinkOptions,
) -> SchemaSubset {
    let base = match opts.merge_mode {
        MergeMode::ColumnUnion => table_first.clone(),
        MergeMode::TableExpand => {
            let mut expanded = table_first.clone();
            for (t, _) in table_first.iter() {
                if let Some(def) = schema.table(t) {
                    expanded.insert_all(t, def.columns.iter().map(|c| c.name.as_str()));
                }
            }
            expanded
        }
    };
    let merged = subset_union(&base, column_first);
    if opts.force_keys {
        with_keys(schema, &merged)
    } else {
        merged
    }
}

/// Both directions, four calls in total, then the merge. Never fails:
/// every stage has a fallback, and fallbacks are recorded.
pub fn link_bidirectional(
    schema: &DatabaseSchema,
    aug: &AugmentedQuestion,
    session: &mut Session<'_>,
    prompts: &PromptSet,
    opts: LinkOptions,
) -> LinkingResult {
    let mut log = LinkLog::default();
    let tf = table_first(schema, aug, session, prompts, &mut log);
    let cf = column_first(schema, aug, session, prompts, &mut log);
    let merged = merge(schema, &tf, &cf, opts);
    LinkingResult {
        table_first: tf,
        column_first: cf,
        merged,
        dropped_hallucinations: log.dropped,
        degradation_events: log.events,
    }
}
