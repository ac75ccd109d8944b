//! Schema-linking scores: recall, false-positive rates, table recall and
//! schema retention, with macro averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatabaseSchema, Difficulty};
use crate::subset::SchemaSubset;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{which} subset contains {table}.{column}, which is not in the schema")]
    OutsideSchema {
        which: &'static str,
        table: String,
        column: String,
    },
    #[error("cannot aggregate an empty list of scores")]
    Empty,
    #[error("merged subset breaks monotonicity: {0}")]
    Monotonicity(String),
}

/// Scores of one retrieved subset against one gold subset, over
/// case-folded (table, column) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkingScore {
    pub recall: f64,
    /// Share of retrieved pairs that are not gold: fp / (tp + fp).
    pub fpr: f64,
    /// fp / (fp + tn), over the non-gold pairs of the schema.
    pub fpr_classical: f64,
    pub table_recall: f64,
    pub tables_retained: f64,
    pub columns_retained: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn check_inside(
    which: &'static str,
    s: &SchemaSubset,
    full: &DatabaseSchema,
) -> Result<(), MetricError> {
    for (table, cols) in s.iter() {
        for col in cols {
            if !full.has_column(table, col) {
                return Err(MetricError::OutsideSchema {
                    which,
                    table: table.to_string(),
                    column: col.to_string(),
                });
            }
        }
    }
    Ok(())
}

pub fn score_linking(
    retrieved: &SchemaSubset,
    gold: &SchemaSubset,
    full: &DatabaseSchema,
) -> Result<LinkingScore, MetricError> {
    check_inside("gold", gold, full)?;
    check_inside("retrieved", retrieved, full)?;

    let r = retrieved.pair_keys();
    let g = gold.pair_keys();
    let tp = r.intersection(&g).count();
    let fp = r.len() - tp;
    let fn_ = g.len() - tp;
    let total = full.pair_count();
    let tn = total - tp - fp - fn_;

    let rt = retrieved.table_keys();
    let gt = gold.table_keys();
    let table_hits = rt.intersection(&gt).count();

    Ok(LinkingScore {
        recall: ratio(tp, tp + fn_, 1.0),
        fpr: ratio(fp, tp + fp, 0.0),
        fpr_classical: ratio(fp, fp + tn, 0.0),
        table_recall: ratio(table_hits, gt.len(), 1.0),
        tables_retained: ratio(rt.len(), full.tables.len(), 0.0),
        columns_retained: ratio(r.len(), total, 0.0),
        tp,
        fp,
        fn_,
        tn,
    })
}

/// Recall and false-positive count of the merged subset must dominate each
/// path's.
pub fn check_monotonicity(
    merged: &LinkingScore,
    paths: &[&LinkingScore],
) -> Result<(), MetricError> {
    for (i, p) in paths.iter().enumerate() {
        if merged.recall + 1e-12 < p.recall {
            return Err(MetricError::Monotonicity(format!(
                "recall {} below path {i} recall {}",
                merged.recall, p.recall
            )));
        }
        if merged.fp < p.fp {
            return Err(MetricError::Monotonicity(format!(
                "fp {} below path {i} fp {}",
                merged.fp, p.fp
            )));
        }
    }
    Ok(())
}

/// Macro averages in percent, rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub recall: f64,
    pub fpr: f64,
    pub fpr_classical: f64,
    pub table_recall: f64,
    pub tables_retained: f64,
    pub columns_retained: f64,
}

/// Rounds to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// A fraction as a percentage with two decimals.
pub fn percent(x: f64) -> f64 {
    round2(x * 100.0)
}

pub fn aggregate(scores: &[LinkingScore]) -> Result<Aggregate, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&LinkingScore) -> f64| percent(scores.iter().map(f).sum::<f64>() / n);
    Ok(Aggregate {
        count: scores.len(),
        recall: mean(|s| s.recall),
        fpr: mean(|s| s.fpr),
        fpr_classical: mean(|s| s.fpr_classical),
        table_recall: mean(|s| s.table_recall),
        tables_retained: mean(|s| s.tables_retained),
        columns_retained: mean(|s| s.columns_retained),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedAggregate {
    pub overall: Aggregate,
    pub by_difficulty: BTreeMap<Difficulty, Aggregate>,
}

pub fn aggregate_by_difficulty(
    scores: &[(Difficulty, LinkingScore)],
) -> Result<GroupedAggregate, MetricError> {
    let all: Vec<LinkingScore> = scores.iter().map(|(_, s)| s.clone()).collect();
    let overall = aggregate(&all)?;
    let mut groups: BTreeMap<Difficulty, Vec<LinkingScore>> = BTreeMap::new();
    for (d, s) in scores {
        groups.entry(*d).or_default().push(s.clone());
    }
    let by_difficulty = groups
        .into_iter()
        .map(|(d, v)| aggregate(&v).map(|a| (d, a)))
        .collect::<Result<_, _>>()?;
    Ok(GroupedAggregate {
        overall,
        by_difficulty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnDef, TableDef};

    fn schema(tables: &[(&str, &[&str])]) -> DatabaseSchema {
        DatabaseSchema {
            db_id: "x".into(),
            tables: tables
                .iter()
                .map(|(name, cols)| TableDef {
                    name: name.to_string(),
                    columns: cols
                        .iter()
                        .map(|c| ColumnDef {
                            name: c.to_string(),
                            declared_type: String::new(),
                            samples: vec![],
                        })
                        .collect(),
                    primary_key: vec![],
                    foreign_keys: vec![],
                })
                .collect(),
        }
    }

    fn twenty() -> DatabaseSchema {
        schema(&[
            ("a", &["a1", "a2", "a3", "a4", "a5"]),
            ("b", &["b1", "b2", "b3", "b4", "b5"]),
            ("c", &["c1", "c2", "c3", "c4", "c5"]),
            ("d", &["d1", "d2", "d3", "d4", "d5"]),
        ])
    }

    #[test]
    fn perfect_retrieval() {
        let full = twenty();
        let mut gold = SchemaSubset::new();
        gold.insert_all("a", ["a1", "a2"]);
        let s = score_linking(&gold, &gold, &full).unwrap();
        assert_eq!((s.recall, s.fpr, s.fpr_classical), (1.0, 0.0, 0.0));
    }

    #[test]
    fn full_schema_on_twenty_pairs() {
        let full = twenty();
        let mut gold = SchemaSubset::new();
        gold.insert_all("a", ["a1", "a2"]);
        gold.insert_all("b", ["b1", "b2", "b3"]);
        let s = score_linking(&full.full_subset(), &gold, &full).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.fpr, 0.75);
        assert_eq!(s.fpr_classical, 1.0);
        assert_eq!((s.tables_retained, s.columns_retained), (1.0, 1.0));
        assert_eq!((s.tp, s.fp, s.fn_, s.tn), (5, 15, 0, 0));
    }

    #[test]
    fn missing_one_of_five_gold_pairs() {
        let full = schema(&[
            ("Examination", &["ID", "KCT", "RVVT"]),
            ("Patient", &["ID", "SEX"]),
            ("Laboratory", &["ID", "T-CHO", "GOT"]),
        ]);
        let mut gold = SchemaSubset::new();
        gold.insert_all("Examination", ["ID", "KCT"]);
        gold.insert("Patient", "ID");
        gold.insert_all("Laboratory", ["ID", "T-CHO"]);
        let mut got = SchemaSubset::new();
        got.insert_all("laboratory", ["id", "t-cho"]);
        got.insert_all("EXAMINATION", ["ID", "KCT"]);
        let s = score_linking(&got, &gold, &full).unwrap();
        assert!((s.recall - 0.8).abs() < 1e-12);
        assert!((s.table_recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.fpr, 0.0);
    }

    #[test]
    fn empty_guards() {
        let full = twenty();
        let s = score_linking(&SchemaSubset::new(), &SchemaSubset::new(), &full).unwrap();
        assert_eq!((s.recall, s.fpr, s.table_recall), (1.0, 0.0, 1.0));
    }

    #[test]
    fn stray_element_is_an_error() {
        let full = twenty();
        let mut bad = SchemaSubset::new();
        bad.insert("a", "zzz");
        let err = score_linking(&bad, &SchemaSubset::new(), &full).unwrap_err();
        assert!(err.to_string().contains("a.zzz"), "{err}");
    }

    #[test]
    fn aggregation() {
        let full = twenty();
        let mut gold = SchemaSubset::new();
        gold.insert_all("a", ["a1", "a2"]);
        let mut half = SchemaSubset::new();
        half.insert("a", "a1");
        let s1 = score_linking(&gold, &gold, &full).unwrap();
        let s2 = score_linking(&half, &gold, &full).unwrap();
        let agg = aggregate(&[s1.clone(), s2.clone()]).unwrap();
        assert_eq!(agg.recall, 75.0);
        assert_eq!(agg.count, 2);
        let single = aggregate(std::slice::from_ref(&s2)).unwrap();
        assert_eq!(single.recall, 50.0);
        assert_eq!(aggregate(&[]), Err(MetricError::Empty));

        let grouped = aggregate_by_difficulty(&[
            (Difficulty::Simple, s1.clone()),
            (Difficulty::Moderate, s2),
            (Difficulty::Simple, s1),
        ])
        .unwrap();
        assert_eq!(grouped.overall.count, 3);
        let sum: usize = grouped.by_difficulty.values().map(|a| a.count).sum();
        assert_eq!(sum, 3);
        assert_eq!(grouped.by_difficulty[&Difficulty::Simple].recall, 100.0);
    }

    #[test]
    fn rounding() {
        assert_eq!(percent(0.906_04), 90.6);
        assert_eq!(percent(2.0 / 3.0), 66.67);
    }
}
