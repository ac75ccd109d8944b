//! The table → columns set algebra shared by gold, retrieved and
//! intermediate schemas.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::DatabaseSchema;

/// Case-insensitive comparison key for table and column names.
pub fn fold(name: &str) -> String {
    name.to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct TableEntry {
    name: String,
    columns: IndexMap<String, String>,
}

/// A map from table to a set of columns. Lookups fold case; the first-seen
/// spelling of each name is kept for display. Insertion order is preserved.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SchemaSubset {
    tables: IndexMap<String, TableEntry>,
}

/// An element removed by [`validate_subset`]. `column` is `None` when the
/// whole table was unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedElement {
    pub table: String,
    pub column: Option<String>,
}

impl SchemaSubset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a (table, column) pair. Returns `true` if the pair was new.
    pub fn insert(&mut self, table: &str, column: &str) -> bool {
        let entry = self
            .tables
            .entry(fold(table))
            .or_insert_with(|| TableEntry {
                name: table.to_string(),
                columns: IndexMap::new(),
            });
        let key = fold(column);
        if entry.columns.contains_key(&key) {
            return false;
        }
        entry.columns.insert(key, column.to_string());
        true
    }

    pub fn insert_all<'a>(&mut self, table: &str, columns: impl IntoIterator<Item = &'a str>) {
        for c in columns {
            self.insert(table, c);
        }
    }

    pub fn contains(&self, table: &str, column: &str) -> bool {
        self.tables
            .get(&fold(table))
            .is_some_and(|t| t.columns.contains_key(&fold(column)))
    }

    pub fn contains_table(&self, table: &str) -> bool {
        self.tables.contains_key(&fold(table))
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn pair_count(&self) -> usize {
        self.tables.values().map(|t| t.columns.len()).sum()
    }

    /// Display names of the tables, in insertion order.
    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.values().map(|t| t.name.as_str())
    }

    /// Display names of one table's columns.
    pub fn columns_of(&self, table: &str) -> Vec<&str> {
        self.tables
            .get(&fold(table))
            .map(|t| t.columns.values().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// `(table, columns)` pairs in display form.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Vec<&str>)> {
        self.tables
            .values()
            .map(|t| (t.name.as_str(), t.columns.values().map(String::as_str).collect()))
    }

    /// Case-folded (table, column) pairs.
    pub fn pair_keys(&self) -> BTreeSet<(String, String)> {
        self.tables
            .iter()
            .flat_map(|(tk, t)| t.columns.keys().map(move |ck| (tk.clone(), ck.clone())))
            .collect()
    }

    /// Case-folded table names.
    pub fn table_keys(&self) -> BTreeSet<String> {
        self.tables.keys().cloned().collect()
    }

    /// Element-wise containment over (table, column) pairs.
    pub fn is_subset_of(&self, other: &SchemaSubset) -> bool {
        self.tables.iter().all(|(tk, t)| {
            other
                .tables
                .get(tk)
                .is_some_and(|o| t.columns.keys().all(|ck| o.columns.contains_key(ck)))
        })
    }

    /// Same pairs regardless of order or spelling.
    pub fn same_pairs(&self, other: &SchemaSubset) -> bool {
        self.pair_keys() == other.pair_keys()
    }

    pub fn remove_table(&mut self, table: &str) {
        self.tables.shift_remove(&fold(table));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("subset serializes")
    }
}

impl fmt::Display for SchemaSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

impl Serialize for SchemaSubset {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.tables.len()))?;
        for t in self.tables.values() {
            let cols: Vec<&String> = t.columns.values().collect();
            map.serialize_entry(&t.name, &cols)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SchemaSubset {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = IndexMap::<String, Vec<String>>::deserialize(deserializer)?;
        let mut s = SchemaSubset::new();
        for (table, cols) in raw {
            if cols.is_empty() {
                return Err(serde::de::Error::custom(format!(
                    "table `{table}` has an empty column list"
                )));
            }
            s.insert_all(&table, cols.iter().map(String::as_str));
        }
        Ok(s)
    }
}

/// Table union plus per-table column union. The first-seen spelling wins.
pub fn subset_union(a: &SchemaSubset, b: &SchemaSubset) -> SchemaSubset {
    let mut out = a.clone();
    for (table, cols) in b.iter() {
        out.insert_all(table, cols);
    }
    out
}

/// Removes every table or column the schema does not contain.
pub fn validate_subset(
    s: &SchemaSubset,
    schema: &DatabaseSchema,
) -> (SchemaSubset, Vec<DroppedElement>) {
    let mut kept = SchemaSubset::new();
    let mut dropped = Vec::new();
    for (table, cols) in s.iter() {
        let Some(def) = schema.table(table) else {
            dropped.push(DroppedElement {
                table: table.to_string(),
                column: None,
            });
            continue;
        };
        for c in cols {
            if def.column_index(c).is_some() {
                kept.insert(table, c);
            } else {
                dropped.push(DroppedElement {
                    table: table.to_string(),
                    column: Some(c.to_string()),
                });
            }
        }
    }
    (kept, dropped)
}
