//! Benchmark ingestion and SQLite schema introspection.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::subset::{fold, SchemaSubset};

/// Errors raised while loading benchmark files or databases.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON at byte offset {offset}: {message}")]
    MalformedJson {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: entry {index}: missing or invalid field `{field}`")]
    MissingField {
        path: PathBuf,
        index: usize,
        field: &'static str,
    },
    #[error("{path}: expected a JSON array of examples")]
    NotAnArray { path: PathBuf },
    #[error("{path}: {message}")]
    Database { path: PathBuf, message: String },
    #[error("{path}: database has no user tables")]
    NoTables { path: PathBuf },
    #[error("{path}: foreign key {table}.{column} references missing {foreign_table}.{foreign_column}")]
    DanglingForeignKey {
        path: PathBuf,
        table: String,
        column: String,
        foreign_table: String,
        foreign_column: String,
    },
    #[error("unknown column {table}.{column}")]
    Lookup { table: String, column: String },
}

impl CorpusError {
    fn db(path: &Path, err: impl fmt::Display) -> Self {
        CorpusError::Database {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    Easy,
    Medium,
    Hard,
    Extra,
    Unknown,
}

impl Difficulty {
    pub fn parse(label: &str) -> Difficulty {
        match label.trim().to_ascii_lowercase().as_str() {
            "simple" => Difficulty::Simple,
            "moderate" => Difficulty::Moderate,
            "challenging" => Difficulty::Challenging,
            "easy" => Difficulty::Easy,
            "medium" => Difficulty::Medium,
            "hard" => Difficulty::Hard,
            "extra" => Difficulty::Extra,
            _ => Difficulty::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Extra => "extra",
            Difficulty::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkExample {
    pub question_id: u64,
    pub db_id: String,
    pub question: String,
    pub hint: String,
    pub gold_sql: String,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFormat {
    Bird,
    Spider,
}

/// Loads a BIRD or Spider style dev file, sorted by question id.
pub fn load_benchmark(
    path: &Path,
    format: BenchmarkFormat,
) -> Result<Vec<BenchmarkExample>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_benchmark(&text, path, format)
}

pub(crate) fn parse_benchmark(
    text: &str,
    path: &Path,
    format: BenchmarkFormat,
) -> Result<Vec<BenchmarkExample>, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::MalformedJson {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(rows) = value else {
        return Err(CorpusError::NotAnArray {
            path: path.to_path_buf(),
        });
    };

    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows.iter().enumerate() {
        let field = |name: &'static str| -> Result<String, CorpusError> {
            row.get(name)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or(CorpusError::MissingField {
                    path: path.to_path_buf(),
                    index,
                    field: name,
                })
        };
        let optional = |name: &str| row.get(name).and_then(Value::as_str).unwrap_or("").to_string();

        let example = match format {
            BenchmarkFormat::Bird => {
                let question_id = row.get("question_id").and_then(Value::as_u64).ok_or(
                    CorpusError::MissingField {
                        path: path.to_path_buf(),
                        index,
                        field: "question_id",
                    },
                )?;
                BenchmarkExample {
                    question_id,
                    db_id: field("db_id")?,
                    question: field("question")?,
                    hint: optional("evidence"),
                    gold_sql: field("SQL")?,
                    difficulty: Difficulty::parse(&optional("difficulty")),
                }
            }
            BenchmarkFormat::Spider => BenchmarkExample {
                question_id: index as u64,
                db_id: field("db_id")?,
                question: field("question")?,
                hint: String::new(),
                gold_sql: field("query")?,
                difficulty: Difficulty::parse(&optional("hardness")),
            },
        };
        for (name, value) in [("question", &example.question), ("gold_sql", &example.gold_sql)] {
            if value.trim().is_empty() {
                return Err(CorpusError::MissingField {
                    path: path.to_path_buf(),
                    index,
                    field: name,
                });
            }
        }
        out.push(example);
    }
    out.sort_by_key(|e| e.question_id);
    Ok(out)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Maps a `db_id` onto its SQLite file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseLocator {
    pub root: PathBuf,
    /// Relative path with a `{db_id}` placeholder.
    pub template: String,
}

impl DatabaseLocator {
    pub const DEFAULT_TEMPLATE: &'static str = "{db_id}/{db_id}.sqlite";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatabaseLocator {
            root: root.into(),
            template: Self::DEFAULT_TEMPLATE.to_string(),
        }
    }

    pub fn path_for(&self, db_id: &str) -> PathBuf {
        self.root.join(self.template.replace("{db_id}", db_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub foreign_table: String,
    pub foreign_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    #[serde(default)]
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub primary_key: Vec<String>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableDef {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        let key = fold(name);
        self.columns.iter().position(|c| fold(&c.name) == key)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.column_index(name).map(|i| &self.columns[i])
    }

    /// Columns standing in for a table that is referenced without any of
    /// its columns: the primary key, or the first column when there is none.
    pub fn key_columns(&self) -> Vec<&str> {
        if self.primary_key.is_empty() {
            self.columns.iter().take(1).map(|c| c.name.as_str()).collect()
        } else {
            self.primary_key.iter().map(String::as_str).collect()
        }
    }
}

/// The full relational schema of one database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
}

impl DatabaseSchema {
    pub fn table_index(&self, name: &str) -> Option<usize> {
        let key = fold(name);
        self.tables.iter().position(|t| fold(&t.name) == key)
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.table_index(name).map(|i| &self.tables[i])
    }

    pub fn has_column(&self, table: &str, column: &str) -> bool {
        self.table(table).is_some_and(|t| t.column_index(column).is_some())
    }

    pub fn pair_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Every (table, column) pair of the schema as a subset.
    pub fn full_subset(&self) -> SchemaSubset {
        let mut s = SchemaSubset::new();
        for t in &self.tables {
            for c in &t.columns {
                s.insert(&t.name, &c.name);
            }
        }
        s
    }
}

/// Sampling knobs for distinct column values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub k: usize,
    pub max_chars: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            k: 3,
            max_chars: 64,
        }
    }
}

fn open_read_only(path: &Path) -> Result<Connection, CorpusError> {
    if !path.is_file() {
        return Err(CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "database file not found"),
        });
    }
    Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| CorpusError::db(path, e))
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Reads tables, columns and keys from the SQLite catalog. Samples are left
/// empty; see [`load_database`] for the enriched form.
pub fn introspect_schema(db_path: &Path) -> Result<DatabaseSchema, CorpusError> {
    let conn = open_read_only(db_path)?;
    introspect_with(&conn, db_path)
}

fn introspect_with(conn: &Connection, db_path: &Path) -> Result<DatabaseSchema, CorpusError> {
    let err = |e: rusqlite::Error| CorpusError::db(db_path, e);
    let mut stmt = conn
        .prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' \
             AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
        )
        .map_err(err)?;
    let names: Vec<String> = stmt
        .query_map([], |r| r.get(0))
        .map_err(err)?
        .collect::<Result<_, _>>()
        .map_err(err)?;
    if names.is_empty() {
        return Err(CorpusError::NoTables {
            path: db_path.to_path_buf(),
        });
    }

    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let mut info = conn
            .prepare(&format!("PRAGMA table_info({})", quote_ident(&name)))
            .map_err(err)?;
        let mut pk: Vec<(i64, String)> = Vec::new();
        let columns = info
            .query_map([], |r| {
                Ok((
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?.unwrap_or_default(),
                    r.get::<_, i64>(5)?,
                ))
            })
            .map_err(err)?
            .map(|row| {
                let (col, ty, pk_pos) = row.map_err(err)?;
                if pk_pos > 0 {
                    pk.push((pk_pos, col.clone()));
                }
                Ok(ColumnDef {
                    name: col,
                    declared_type: ty,
                    samples: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        pk.sort();

        let mut fk_stmt = conn
            .prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(&name)))
            .map_err(err)?;
        let raw_fks: Vec<(String, String, Option<String>)> = fk_stmt
            .query_map([], |r| Ok((r.get(3)?, r.get(2)?, r.get(4)?)))
            .map_err(err)?
            .collect::<Result<_, _>>()
            .map_err(err)?;

        tables.push((
            TableDef {
                name,
                columns,
                primary_key: pk.into_iter().map(|(_, c)| c).collect(),
                foreign_keys: Vec::new(),
            },
            raw_fks,
        ));
    }

    // Foreign keys are resolved once every table is known.
    let snapshot: Vec<TableDef> = tables.iter().map(|(t, _)| t.clone()).collect();
    let lookup = DatabaseSchema {
        db_id: String::new(),
        tables: snapshot,
    };
    let mut resolved = Vec::with_capacity(tables.len());
    for (mut table, raw_fks) in tables {
        for (column, foreign_table, foreign_column) in raw_fks {
            let dangling = |foreign_column: String| CorpusError::DanglingForeignKey {
                path: db_path.to_path_buf(),
                table: table.name.clone(),
                column: column.clone(),
                foreign_table: foreign_table.clone(),
                foreign_column,
            };
            let Some(target) = lookup.table(&foreign_table) else {
                return Err(dangling(foreign_column.unwrap_or_default()));
            };
            let foreign_column = match foreign_column {
                Some(c) => c,
                // Implicit reference to the parent's primary key.
                None => match target.primary_key.as_slice() {
                    [single] => single.clone(),
                    _ => return Err(dangling(String::new())),
                },
            };
            let Some(target_col) = target.column(&foreign_column) else {
                return Err(dangling(foreign_column));
            };
            table.foreign_keys.push(ForeignKey {
                column,
                foreign_table: target.name.clone(),
                foreign_column: target_col.name.clone(),
            });
        }
        resolved.push(table);
    }

    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DatabaseSchema {
        db_id,
        tables: resolved,
    })
}

/// Introspects the schema and fills every column's samples.
pub fn load_database(db_path: &Path, opts: &SampleOptions) -> Result<DatabaseSchema, CorpusError> {
    let conn = open_read_only(db_path)?;
    let mut schema = introspect_with(&conn, db_path)?;
    for table in &mut schema.tables {
        for column in &mut table.columns {
            column.samples = sample_resolved(&conn, db_path, &table.name, &column.name, opts)?;
        }
    }
    Ok(schema)
}

/// Up to `opts.k` distinct non-NULL values of a column, in first-seen rowid
/// order, truncated and sanitized.
pub fn sample_distinct_values(
    db_path: &Path,
    table: &str,
    column: &str,
    opts: &SampleOptions,
) -> Result<Vec<String>, CorpusError> {
    let conn = open_read_only(db_path)?;
    sample_with(&conn, db_path, table, column, opts)
}

fn sample_with(
    conn: &Connection,
    db_path: &Path,
    table: &str,
    column: &str,
    opts: &SampleOptions,
) -> Result<Vec<String>, CorpusError> {
    let lookup = || CorpusError::Lookup {
        table: table.to_string(),
        column: column.to_string(),
    };
    let schema = introspect_with(conn, db_path)?;
    let table_def = schema.table(table).ok_or_else(lookup)?;
    let column_def = table_def.column(column).ok_or_else(lookup)?;
    sample_resolved(conn, db_path, &table_def.name, &column_def.name, opts)
}

fn sample_resolved(
    conn: &Connection,
    db_path: &Path,
    table: &str,
    column: &str,
    opts: &SampleOptions,
) -> Result<Vec<String>, CorpusError> {
    if opts.k == 0 {
        return Ok(Vec::new());
    }
    let base = format!(
        "SELECT {col} FROM {tbl} WHERE {col} IS NOT NULL",
        col = quote_ident(column),
        tbl = quote_ident(table)
    );
    // WITHOUT ROWID tables have no rowid to order by.
    let mut stmt = match conn.prepare(&format!("{base} ORDER BY rowid")) {
        Ok(s) => s,
        Err(_) => conn.prepare(&base).map_err(|e| CorpusError::db(db_path, e))?,
    };
    let mut rows = stmt.query([]).map_err(|e| CorpusError::db(db_path, e))?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(|e| CorpusError::db(db_path, e))? {
        let rendered = match row.get_ref(0).map_err(|e| CorpusError::db(db_path, e))? {
            ValueRef::Null | ValueRef::Blob(_) => continue,
            ValueRef::Integer(i) => i.to_string(),
            ValueRef::Real(f) => f.to_string(),
            ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        };
        // Sanitizing before truncation keeps cut-off URL fragments out.
        let value: String = sanitize_value(&rendered).chars().take(opts.max_chars).collect();
        if value.is_empty() || !seen.insert(value.clone()) {
            continue;
        }
        out.push(value);
        if out.len() == opts.k {
            break;
        }
    }
    Ok(out)
}

static URL_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:[A-Za-z][A-Za-z0-9+.\-]*://|\b[Ww]{3}\.)\S*").expect("valid URL pattern")
});

/// Removes URL-like tokens (`scheme://...` or `www....`) from a sample
/// value. Whitespace is collapsed only when something was removed.
pub fn sanitize_value(text: &str) -> String {
    if !URL_PATTERN.is_match(text) {
        return text.to_string();
    }
    let stripped = URL_PATTERN.replace_all(text, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}
