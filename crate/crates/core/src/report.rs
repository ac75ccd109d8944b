//! Renders a run summary as a text table, JSON or CSV.

use std::fmt::Write as _;

use crate::corpus::Difficulty;
use crate::metrics::{Aggregate, GroupedAggregate};
use crate::run::{ExCell, Summary};
use crate::sqlgen::Setting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

pub const CSV_HEADER: &str = "section,name,difficulty,count,recall,fpr,fpr_classical,table_recall,tables_retained,columns_retained,executed,matched,ex";

pub fn render(summary: &Summary, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => format!("{}{}", linking_text(summary), execution_text(summary)),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => csv(summary),
    }
}

fn paths(summary: &Summary) -> Vec<(&'static str, &GroupedAggregate)> {
    summary.linking.as_ref().map_or_else(Vec::new, |l| {
        vec![
            ("table-first", &l.table_first),
            ("column-first", &l.column_first),
            ("bidirectional", &l.bidirectional),
        ]
    })
}

fn linking_row(out: &mut String, label: &str, a: &Aggregate) {
    let _ = writeln!(
        out,
        "{label:<16}{:>6}{:>9.2}{:>9.2}{:>10.2}{:>9.2}{:>9.2}{:>10.2}",
        a.count, a.recall, a.fpr, a.fpr_classical, a.table_recall, a.tables_retained, a.columns_retained
    );
}

/// Linking table: one row per path, then the bidirectional path split by
/// difficulty.
pub fn linking_text(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Schema linking ({} examples)", summary.examples);
    let paths = paths(summary);
    if paths.is_empty() {
        out.push_str("  no scored examples\n");
        return out;
    }
    let _ = writeln!(
        out,
        "{:<16}{:>6}{:>9}{:>9}{:>10}{:>9}{:>9}{:>10}",
        "path", "n", "Rec.", "FPR", "FPR(cls)", "TblRec", "Tables%", "Columns%"
    );
    for (name, g) in &paths {
        linking_row(&mut out, name, &g.overall);
    }
    let (_, bidi) = paths[paths.len() - 1];
    if bidi.by_difficulty.len() > 1 {
        out.push_str("\nbidirectional by difficulty\n");
        for (d, a) in &bidi.by_difficulty {
            linking_row(&mut out, d.as_str(), a);
        }
    }
    out
}

/// Execution-accuracy table: settings as rows, difficulties as columns.
pub fn execution_text(summary: &Summary) -> String {
    let mut out = String::new();
    let Some(exec) = &summary.execution else {
        return out;
    };
    let mut diffs: Vec<Difficulty> = exec
        .settings
        .values()
        .flat_map(|g| g.by_difficulty.keys().copied())
        .collect();
    diffs.sort();
    diffs.dedup();
    let compare = match exec.compare {
        crate::sqlgen::CompareMode::Bag => "bag",
        crate::sqlgen::CompareMode::Set => "set",
    };
    let _ = writeln!(out, "\nExecution accuracy (row comparison: {compare})");
    let _ = write!(out, "{:<12}", "setting");
    for d in &diffs {
        let _ = write!(out, "{:>13}", d.as_str());
    }
    let _ = writeln!(out, "{:>13}{:>6}", "total", "n");
    for setting in Setting::ALL {
        let Some(g) = exec.settings.get(&setting) else { continue };
        let _ = write!(out, "{:<12}", setting.as_str());
        for d in &diffs {
            match g.by_difficulty.get(d) {
                Some(c) => {
                    let _ = write!(out, "{:>13.2}", c.ex);
                }
                None => {
                    let _ = write!(out, "{:>13}", "-");
                }
            }
        }
        let _ = writeln!(out, "{:>13.2}{:>6}", g.overall.ex, g.overall.count);
    }
    out
}

fn csv_linking(out: &mut String, name: &str, difficulty: &str, a: &Aggregate) {
    let _ = writeln!(
        out,
        "linking,{name},{difficulty},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},,,",
        a.count, a.recall, a.fpr, a.fpr_classical, a.table_recall, a.tables_retained, a.columns_retained
    );
}

fn csv_exec(out: &mut String, name: &str, difficulty: &str, c: &ExCell) {
    let _ = writeln!(
        out,
        "execution,{name},{difficulty},{},,,,,,,{},{},{:.2}",
        c.count, c.executed, c.matched, c.ex
    );
}

pub fn csv(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    let names = ["table_first", "column_first", "bidirectional"];
    for ((_, g), name) in paths(summary).into_iter().zip(names) {
        csv_linking(&mut out, name, "all", &g.overall);
        for (d, a) in &g.by_difficulty {
            csv_linking(&mut out, name, d.as_str(), a);
        }
    }
    if let Some(exec) = &summary.execution {
        for setting in Setting::ALL {
            let Some(g) = exec.settings.get(&setting) else { continue };
            csv_exec(&mut out, setting.as_str(), "all", &g.overall);
            for (d, c) in &g.by_difficulty {
                csv_exec(&mut out, setting.as_str(), d.as_str(), c);
            }
        }
    }
    out
}
