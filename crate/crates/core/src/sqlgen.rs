//! SQL generation under a schema setting, and execution-accuracy scoring.

use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sqlparser::ast::Statement;
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::augment::AugmentedQuestion;
use crate::backend::{parse_json_object, CallError, Session};
use crate::corpus::DatabaseSchema;
use crate::prompts::{generation_schema, PromptSet, TemplateKind};
use crate::subset::SchemaSubset;

/// Which schema the generator is shown.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Full,
    Perfect,
    Retrieved,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Full, Setting::Perfect, Setting::Retrieved];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Full => "full",
            Setting::Perfect => "perfect",
            Setting::Retrieved => "retrieved",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Setting::Full => "sqlgen_full",
            Setting::Perfect => "sqlgen_perfect",
            Setting::Retrieved => "sqlgen_retrieved",
        }
    }
}

/// Row comparison used for execution accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CompareMode {
    /// Multisets of rows: duplicates matter.
    #[default]
    Bag,
    /// Sets of rows: duplicates collapse.
    Set,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub setting: Setting,
    pub predicted_sql: String,
    pub executed: bool,
    pub execution_match: bool,
    pub error_text: Option<String>,
    pub latency_ms: u64,
    /// Set once the predicted query has been executed and compared.
    #[serde(default)]
    pub evaluated: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SqlGenError {
    #[error("cannot open {path}: {message}")]
    Open { path: String, message: String },
    #[error("gold query fails on {db}: {message}")]
    Gold { db: String, message: String },
}

fn sql_from_reply(text: &str) -> Option<String> {
    let v = parse_json_object(text).ok()?;
    let obj = v.as_object()?;
    let sql = obj
        .get("SQL")
        .or_else(|| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case("sql")).map(|(_, v)| v))?
        .as_str()?
        .trim();
    (!sql.is_empty()).then(|| sql.to_string())
}

/// One call, one sampled response. Returns the SQL and the call latency.
pub fn generate_sql(
    subset: &SchemaSubset,
    schema: &DatabaseSchema,
    aug: &AugmentedQuestion,
    setting: Setting,
    session: &mut Session<'_>,
    prompts: &PromptSet,
) -> Result<(String, u64), CallError> {
    let schema_text = generation_schema(schema, subset);
    let aq = aug.prompt_json();
    let prompt = prompts.render(
        TemplateKind::SqlGeneration,
        &[("SCHEMA", &schema_text), ("AUGMENTED_QUESTION", &aq), ("EVIDENCE", &aug.hint)],
    );
    let latency = |s: &Session<'_>| s.telemetry().stages.get(setting.tag()).map_or(0, |st| st.latency_ms);
    let before = latency(session);
    let sql = session.complete_parsed(setting.tag(), &prompt, sql_from_reply)?;
    Ok((sql, latency(session) - before))
}

/// A result cell normalised for comparison. Numbers are scaled to
/// micro-units and rounded, so `1` and `1.0000001` compare equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cell {
    Null,
    Num(i128),
    Text(String),
    Blob(Vec<u8>),
}

fn cell(v: ValueRef<'_>) -> Cell {
    match v {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) => Cell::Num(i as i128 * 1_000_000),
        ValueRef::Real(f) => {
            let scaled = (f * 1e6).round();
            if scaled.is_finite() && scaled.abs() < 1e30 {
                Cell::Num(scaled as i128)
            } else {
                Cell::Text(f.to_string())
            }
        }
        ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
    }
}

pub type Rows = Vec<Vec<Cell>>;

/// Read-only connection that refuses writes even through pragmas.
pub fn open_read_only(db_path: &Path) -> Result<Connection, rusqlite::Error> {
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.pragma_update(None, "query_only", true)?;
    Ok(conn)
}

/// Runs `sql`, interrupting it once `timeout` has elapsed.
pub fn run_query(conn: &Connection, sql: &str, timeout: Duration) -> Result<Rows, String> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline))
        .map_err(|e| e.to_string())?;
    let result = (|| {
        let mut stmt = conn.prepare(sql)?;
        let width = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            out.push((0..width).map(|i| row.get_ref(i).map(cell)).collect::<Result<Vec<_>, _>>()?);
        }
        Ok::<_, rusqlite::Error>(out)
    })();
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    result.map_err(|e| match e {
        rusqlite::Error::SqliteFailure(err, _) if err.code == rusqlite::ErrorCode::OperationInterrupted => {
            format!("timed out after {:.1}s", timeout.as_secs_f64())
        }
        other => other.to_string(),
    })
}

/// True when the outermost statement carries an ORDER BY.
pub fn has_top_level_order_by(sql: &str) -> bool {
    match Parser::parse_sql(&SQLiteDialect {}, sql) {
        Ok(stmts) => matches!(stmts.first(), Some(Statement::Query(q)) if q.order_by.is_some()),
        Err(_) => false,
    }
}

pub fn rows_match(pred: &Rows, gold: &Rows, ordered: bool, mode: CompareMode) -> bool {
    if ordered {
        return match mode {
            CompareMode::Bag => pred == gold,
            CompareMode::Set => {
                let mut p = pred.clone();
                let mut g = gold.clone();
                p.dedup();
                g.dedup();
                p == g
            }
        };
    }
    let mut p = pred.clone();
    let mut g = gold.clone();
    p.sort();
    g.sort();
    if mode == CompareMode::Set {
        p.dedup();
        g.dedup();
    }
    p == g
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    pub timeout: Duration,
    pub compare: CompareMode,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            timeout: Duration::from_secs(30),
            compare: CompareMode::Bag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub executed: bool,
    pub matched: bool,
    pub error: Option<String>,
}

/// Executes both queries and compares their results. A failing predicted
/// query is a non-match; a failing gold query is an error.
pub fn execution_accuracy(
    pred_sql: &str,
    gold_sql: &str,
    db_path: &Path,
    opts: ExecOptions,
) -> Result<Execution, SqlGenError> {
    let conn = open_read_only(db_path).map_err(|e| SqlGenError::Open {
        path: db_path.display().to_string(),
        message: e.to_string(),
    })?;
    let gold = run_query(&conn, gold_sql, opts.timeout).map_err(|message| SqlGenError::Gold {
        db: db_path.display().to_string(),
        message,
    })?;
    match run_query(&conn, pred_sql, opts.timeout) {
        Ok(pred) => Ok(Execution {
            executed: true,
            matched: rows_match(&pred, &gold, has_top_level_order_by(gold_sql), opts.compare),
            error: None,
        }),
        Err(message) => Ok(Execution {
            executed: false,
            matched: false,
            error: Some(message),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(a INTEGER, b TEXT, c REAL);
             INSERT INTO t VALUES (1,'x',0.5),(2,'y',1.0),(2,'y',1.0),(3,NULL,2.25);",
        )
        .unwrap();
        (dir, path)
    }

    fn ex(pred: &str, gold: &str, path: &Path) -> Execution {
        execution_accuracy(pred, gold, path, ExecOptions::default()).unwrap()
    }

    #[test]
    fn reflexive() {
        let (_d, p) = db();
        for q in ["SELECT * FROM t", "SELECT a FROM t ORDER BY a DESC", "SELECT COUNT(*) FROM t"] {
            assert!(ex(q, q, &p).matched, "{q}");
        }
    }

    #[test]
    fn order_matters_only_when_gold_orders() {
        let (_d, p) = db();
        assert!(ex("SELECT a FROM t ORDER BY a DESC", "SELECT a FROM t", &p).matched);
        assert!(!ex("SELECT a FROM t ORDER BY a DESC", "SELECT a FROM t ORDER BY a", &p).matched);
        // subquery ordering does not make the outer query ordered
        assert!(ex(
            "SELECT a FROM t",
            "SELECT a FROM (SELECT a FROM t ORDER BY a DESC)",
            &p
        )
        .matched);
    }

    #[test]
    fn extra_column_and_duplicates() {
        let (_d, p) = db();
        assert!(!ex("SELECT a, b FROM t", "SELECT a FROM t", &p).matched);
        let distinct = "SELECT DISTINCT a FROM t";
        let all = "SELECT a FROM t";
        assert!(!ex(distinct, all, &p).matched);
        let set = ExecOptions {
            compare: CompareMode::Set,
            ..ExecOptions::default()
        };
        assert!(execution_accuracy(distinct, all, &p, set).unwrap().matched);
    }

    #[test]
    fn numbers_compare_across_types_and_nulls_match() {
        let (_d, p) = db();
        assert!(ex("SELECT 1.0, NULL", "SELECT 1, NULL", &p).matched);
        assert!(ex("SELECT 0.1 + 0.2", "SELECT 0.3", &p).matched);
        assert!(!ex("SELECT '1'", "SELECT 1", &p).matched);
    }

    #[test]
    fn failing_prediction_is_a_miss_failing_gold_is_an_error() {
        let (_d, p) = db();
        let r = ex("SELEC nonsense", "SELECT a FROM t", &p);
        assert!(!r.executed && !r.matched && r.error.is_some());
        assert!(matches!(
            execution_accuracy("SELECT 1", "SELECT nope FROM t", &p, ExecOptions::default()),
            Err(SqlGenError::Gold { .. })
        ));
    }

    #[test]
    fn writes_are_refused() {
        let (_d, p) = db();
        let before = std::fs::read(&p).unwrap();
        let r = ex("DELETE FROM t", "SELECT a FROM t", &p);
        assert!(!r.executed);
        assert_eq!(std::fs::read(&p).unwrap(), before);
    }

    #[test]
    fn slow_query_times_out() {
        let (_d, p) = db();
        let conn = open_read_only(&p).unwrap();
        let slow = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT COUNT(*) FROM c";
        let err = run_query(&conn, slow, Duration::from_millis(50)).unwrap_err();
        assert!(err.contains("timed out"), "{err}");
        // the connection stays usable afterwards
        assert_eq!(run_query(&conn, "SELECT 1", Duration::from_secs(1)).unwrap().len(), 1);
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(sql_from_reply(r#"{"SQL": " SELECT 1 "}"#).as_deref(), Some("SELECT 1"));
        assert_eq!(sql_from_reply(r#"{"sql": "SELECT 2"}"#).as_deref(), Some("SELECT 2"));
        assert!(sql_from_reply(r#"{"SQL": ""}"#).is_none());
        assert!(sql_from_reply("SELECT 1").is_none());
    }
}
