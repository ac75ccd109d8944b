//! End-to-end runs over the fixture databases with the replay backend.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use schemalink::config::Config;
use schemalink::run::{self, Plan, RunOptions, RunOutcome, RunRecord, Stage};
use schemalink::sqlgen::Setting;
use schemalink::SchemaSubset;

use common::Workspace;

fn run_plan(cfg: &Config, stages: &[Stage], settings: &[Setting], dir: &Path) -> RunOutcome {
    let opts = RunOptions { run_dir: Some(dir.to_path_buf()), ..Default::default() };
    run::run_pipeline(cfg, &Plan::new(stages.iter().copied(), settings), &opts).unwrap()
}

fn records(out: &RunOutcome) -> BTreeMap<u64, RunRecord> {
    run::read_records(&out.run_dir.join(run::RECORDS_FILE)).unwrap()
}

/// Copies the replay fixtures, dropping lines `drop` selects and appending
/// `extra` records.
fn edited_replay(dir: &Path, drop: impl Fn(&Value) -> bool, extra: &[Value]) -> PathBuf {
    let src = std::fs::read_to_string(common::fixtures().join("replay/fixtures.jsonl")).unwrap();
    let mut out = String::new();
    for line in src.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        if !drop(&v) {
            out.push_str(line);
            out.push('\n');
        }
    }
    for v in extra {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    let path = dir.join("edited.jsonl");
    std::fs::write(&path, out).unwrap();
    path
}

fn is(v: &Value, qid: u64, tag: &str) -> bool {
    v["question_id"] == qid && v["tag"] == tag
}

#[test]
fn full_run_reports_the_designed_execution_accuracy() {
    let ws = Workspace::new();
    let out = run_plan(&ws.config(), &[Stage::Score, Stage::Eval], &Setting::ALL, &ws.run_dir("all"));
    let s = &out.summary;
    assert_eq!(s.examples, 7);
    assert_eq!(s.examples_with_errors, 0);
    assert_eq!(s.degradations, 0);
    // trans.district and the `members` table are not in the schema
    assert_eq!(s.hallucinations_dropped, 2);

    let exec = s.execution.as_ref().unwrap();
    let ex = |setting| exec.settings[&setting].overall.clone();
    // the full-schema reply for 71 does not parse as SQL and 141 selects the wrong column
    assert_eq!((ex(Setting::Full).executed, ex(Setting::Full).matched), (6, 5));
    assert_eq!(ex(Setting::Full).ex, 71.43);
    assert_eq!(ex(Setting::Perfect).ex, 100.0);
    assert_eq!((ex(Setting::Retrieved).matched, ex(Setting::Retrieved).ex), (3, 42.86));
    assert_eq!(s.calls.per_example, 9.0);
    assert_eq!(s.calls.total, 63);

    let recs = records(&out);
    let full71 = &recs[&71].generations[&Setting::Full];
    assert!(!full71.executed && full71.error_text.is_some());
}

#[test]
fn error_cases_retrieve_the_expected_schemas() {
    let ws = Workspace::new();
    let out = run_plan(&ws.config(), &[Stage::Score], &[], &ws.run_dir("errors"));
    let recs = records(&out);
    // (question, retrieved schema, missing pairs)
    type Case<'a> = (u64, Value, &'a [(&'a str, &'a str)]);
    let cases: [Case; 4] = [
        (
            130,
            json!({"District": ["district_id", "A3"], "Client": ["district_id", "client_id"],
                   "Disp": ["account_id", "client_id"], "Account": ["account_id", "district_id"],
                   "Card": ["disp_id"]}),
            &[("disp", "type")],
        ),
        (
            71,
            json!({"frpm": ["County Name", "Enrollment (K-12)", "CDSCode"]}),
            &[("frpm", "School Name"), ("frpm", "Free Meal Count (K-12)")],
        ),
        (
            141,
            json!({"trans": ["date", "amount", "balance"], "account": ["account_id"], "client": ["district_id"]}),
            &[("trans", "account_id"), ("account", "district_id"), ("district", "district_id"), ("district", "A3")],
        ),
        (
            711,
            json!({"member": ["zip", "position", "link_to_major"]}),
            &[("member", "member_id"), ("attendance", "link_to_member")],
        ),
    ];
    for (qid, want, missing) in cases {
        let rec = &recs[&qid];
        let want: SchemaSubset = serde_json::from_value(want).unwrap();
        let merged = &rec.linking.as_ref().unwrap().merged;
        assert!(merged.same_pairs(&want), "{qid}: {merged}");
        let gold = &rec.gold.as_ref().unwrap().subset;
        let mut absent: Vec<(String, String)> = gold
            .pair_keys()
            .into_iter()
            .filter(|(t, c)| !merged.contains(t, c))
            .collect();
        absent.sort();
        let mut expected: Vec<(String, String)> =
            missing.iter().map(|(t, c)| (t.to_lowercase(), c.to_lowercase())).collect();
        expected.sort();
        assert_eq!(absent, expected, "{qid}");
    }
    // QID 130: six of seven gold pairs found
    let score = &recs[&130].scores.as_ref().unwrap().merged;
    assert_eq!((score.tp, score.fn_), (6, 1));
}

#[test]
fn missing_fixtures_degrade_instead_of_failing() {
    let ws = Workspace::new();
    let replay = edited_replay(
        ws.path(),
        |v| is(v, 291, "tf_tables") || is(v, 291, "keywords") || is(v, 271, "cf_tables"),
        &[],
    );
    let mut cfg = ws.config();
    cfg.replay_fixtures = Some(replay);
    let out = run_plan(&cfg, &[Stage::Score], &[], &ws.run_dir("degraded"));
    let recs = records(&out);

    let r291 = &recs[&291];
    assert_eq!(r291.augment_events.len(), 1);
    assert_eq!(r291.augment_events[0].stage, "keywords");
    // keywords fall back to the question's longer words
    let aug = r291.augmented.as_ref().unwrap();
    assert!(aug.keywords.contains(&"chemical".to_string()), "{:?}", aug.keywords);
    let link = r291.linking.as_ref().unwrap();
    assert!(link.degradation_events.iter().any(|d| d.stage == "tf_tables"));
    // the table call fell back to the whole schema; the column call still ran
    assert_eq!(link.table_first.to_json(), r#"{"Molecule":["label"]}"#);

    let link = recs[&271].linking.as_ref().unwrap();
    assert!(link.degradation_events.iter().any(|d| d.stage == "cf_tables"));
    assert_eq!(link.column_first.to_json(), r#"{"Atom":["atom_id","molecule_id","element"],"Bond":["bond_id","molecule_id"]}"#);

    assert_eq!(out.summary.examples_with_errors, 0);
    assert_eq!(out.summary.degradations, 3);
    assert!(recs.values().all(|r| r.scores.is_some()));
}

#[test]
fn unparseable_reply_gets_one_more_attempt() {
    let ws = Workspace::new();
    let good = json!({"question_id": 291, "tag": "decompose",
                      "response": r#"{"Subquestions": ["Which molecules are carcinogenic?"]}"#});
    let bad = json!({"question_id": 291, "tag": "decompose", "response": "I cannot answer that."});
    let replay = edited_replay(ws.path(), |v| is(v, 291, "decompose"), &[bad, good]);
    let mut cfg = ws.config();
    cfg.replay_fixtures = Some(replay);
    let out = run_plan(&cfg, &[Stage::Augment], &[], &ws.run_dir("retry"));
    let rec = &records(&out)[&291];
    assert_eq!(rec.augmented.as_ref().unwrap().subquestions, ["Which molecules are carcinogenic?"]);
    assert_eq!(rec.telemetry.calls("decompose"), 2);
    let attempts: Vec<u32> = rec
        .transcript
        .iter()
        .filter(|e| e.tag == "decompose")
        .map(|e| e.attempt)
        .collect();
    assert_eq!(attempts, [0, 1]);
    assert!(rec.augment_events.is_empty());
}

#[test]
fn both_augmentation_calls_failing_is_a_recorded_error_and_resumable() {
    let ws = Workspace::new();
    let replay = edited_replay(
        ws.path(),
        |v| v["question_id"] == 711 && (v["tag"] == "decompose" || v["tag"] == "keywords"),
        &[],
    );
    let mut broken = ws.config();
    broken.replay_fixtures = Some(replay);
    let dir = ws.run_dir("resume");
    let out = run_plan(&broken, &[Stage::Link], &[], &dir);
    assert_eq!(out.summary.examples_with_errors, 1);
    let rec = &records(&out)[&711];
    assert_eq!(rec.errors[0].stage, "augment");
    assert!(rec.augmented.is_none() && rec.linking.is_none());

    // with the fixtures restored only the failed example is redone
    let out = run_plan(&ws.config(), &[Stage::Link], &[], &dir);
    assert_eq!(out.processed, 1);
    assert_eq!(out.summary.examples_with_errors, 0);
    assert!(records(&out)[&711].linking.is_some());
}

#[test]
fn later_stages_reuse_earlier_work() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let dir = ws.run_dir("staged");
    let first = run_plan(&cfg, &[Stage::Score], &[], &dir);
    assert_eq!(first.stats.provider_calls, 7 * 6);
    let second = run_plan(&cfg, &[Stage::Generate], &[Setting::Perfect], &dir);
    assert_eq!(second.stats.provider_calls, 7);
    let third = run_plan(&cfg, &[Stage::Eval], &[Setting::Perfect], &dir);
    assert_eq!(third.stats.provider_calls, 0);
    assert_eq!(third.summary.execution.as_ref().unwrap().settings[&Setting::Perfect].overall.ex, 100.0);
    for rec in records(&third).values() {
        assert_eq!(rec.telemetry.total_calls(), 7, "{}", rec.question_id);
    }
}

#[test]
fn selection_by_ids_and_limit() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let plan = Plan::new([Stage::Augment], &[]);
    let opts = RunOptions {
        run_dir: Some(ws.run_dir("ids")),
        ids: Some(vec![1297, 71, 9999]),
        ..Default::default()
    };
    let out = run::run_pipeline(&cfg, &plan, &opts).unwrap();
    assert_eq!(records(&out).keys().copied().collect::<Vec<_>>(), [71, 1297]);

    let opts = RunOptions { run_dir: Some(ws.run_dir("limit")), limit: Some(2), ..Default::default() };
    let out = run::run_pipeline(&cfg, &plan, &opts).unwrap();
    // examples are ordered by question id
    assert_eq!(records(&out).keys().copied().collect::<Vec<_>>(), [71, 130]);
}

#[test]
fn run_directory_layout_and_frozen_config() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let out = run::run_pipeline(&cfg, &Plan::new([Stage::Augment], &[]), &RunOptions::default()).unwrap();
    let name = out.run_dir.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.ends_with(&format!("-{}", cfg.digest())), "{name}");
    assert!(out.run_dir.starts_with(ws.path().join("runs")));
    for f in [run::RECORDS_FILE, run::SUMMARY_FILE, run::TELEMETRY_FILE, run::CONFIG_FILE, run::MANIFEST_FILE] {
        assert!(out.run_dir.join(f).is_file(), "{f} missing");
    }
    let frozen = run::load_run_config(&out.run_dir).unwrap();
    assert_eq!(frozen.dataset, cfg.dataset);
    assert_eq!(frozen.replay_fixtures, cfg.replay_fixtures);
    let manifest: Value = serde_json::from_slice(&common::file_bytes(&out.run_dir.join(run::MANIFEST_FILE))).unwrap();
    assert_eq!(manifest["backend"], "replay");
    assert_eq!(manifest["config_digest"], cfg.digest());
}

#[test]
fn corrupt_records_file_is_rejected() {
    let ws = Workspace::new();
    let dir = ws.run_dir("corrupt");
    let out = run_plan(&ws.config(), &[Stage::Augment], &[], &dir);
    let path = out.run_dir.join(run::RECORDS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{not a record";
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = run::read_records(&path).unwrap_err();
    assert!(err.to_string().contains(":2"), "{err}");
}
