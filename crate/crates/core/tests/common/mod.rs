#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde::Deserialize;

use schemalink::config::Config;
use schemalink::corpus::{introspect_schema, DatabaseSchema};
use schemalink::SchemaSubset;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub const DATABASES: [&str; 5] = [
    "california_schools",
    "financial",
    "student_club",
    "thrombosis_prediction",
    "toxicology",
];

/// Builds every fixture database under `root` as `{db}/{db}.sqlite`.
pub fn build_data_root(root: &Path) {
    for db in DATABASES {
        let script = std::fs::read_to_string(fixtures().join("db").join(format!("{db}.sql")))
            .unwrap_or_else(|e| panic!("{db}.sql: {e}"));
        let dir = root.join(db);
        std::fs::create_dir_all(&dir).unwrap();
        let conn = rusqlite::Connection::open(dir.join(format!("{db}.sqlite"))).unwrap();
        conn.execute_batch(&script)
            .unwrap_or_else(|e| panic!("{db}.sql: {e}"));
    }
}

pub fn db_path(root: &Path, db: &str) -> PathBuf {
    root.join(db).join(format!("{db}.sqlite"))
}

pub fn schema(root: &Path, db: &str) -> DatabaseSchema {
    introspect_schema(&db_path(root, db)).unwrap()
}

/// A scratch area holding the fixture databases and a replay config.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self::with_config(serde_json::json!({}))
    }

    /// `extra` is merged over the default config.
    pub fn with_config(extra: serde_json::Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        build_data_root(&dir.path().join("data"));
        let mut cfg = serde_json::json!({
            "dataset": fixtures().join("dev.json"),
            "data_root": "data",
            "replay_fixtures": fixtures().join("replay"),
            "runs_root": "runs",
            "workers": 3,
            "generation": {"settings": ["full", "perfect", "retrieved"]}
        });
        if let (Some(base), Some(over)) = (cfg.as_object_mut(), extra.as_object()) {
            for (k, v) in over {
                base.insert(k.clone(), v.clone());
            }
        }
        std::fs::write(
            dir.path().join("config.json"),
            serde_json::to_string_pretty(&cfg).unwrap(),
        )
        .unwrap();
        Workspace { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config_path(&self) -> PathBuf {
        self.path().join("config.json")
    }

    pub fn config(&self) -> Config {
        Config::load(&self.config_path()).unwrap()
    }

    pub fn data_root(&self) -> PathBuf {
        self.path().join("data")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.path().join("runs").join(name)
    }
}

#[derive(Debug, Deserialize)]
pub struct ScopeCase {
    pub id: u32,
    pub db: String,
    pub sql: String,
    pub gold: SchemaSubset,
    pub used_star: Option<bool>,
}

pub fn scope_corpus() -> Vec<ScopeCase> {
    let text = std::fs::read_to_string(fixtures().join("scope_corpus.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Subset from `table: [columns]` pairs.
pub fn subset(pairs: &[(&str, &[&str])]) -> SchemaSubset {
    let mut s = SchemaSubset::new();
    for (t, cols) in pairs {
        s.insert_all(t, cols.iter().copied());
    }
    s
}

/// Raw bytes of a file, panicking with its path on failure.
pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
