//! Dataset-scale orchestration: per-example records, resumable runs and
//! summaries.
//!
//! A run directory holds:
//!
//! * `config.json`: the resolved configuration the run was created with
//! * `run.json`: creation time, version and backend identity
//! * `records.jsonl`: one [`RunRecord`] per example, sorted by question id
//! * `summary.json`: aggregate scores
//! * `telemetry.json`: provider/cache counters of the last invocation
//! * `cache/`: cached completions

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentedQuestion, Degradation};
use crate::backend::{ClientStats, Exchange, LlmClient, Telemetry};
use crate::config::{Config, ConfigError};
use crate::corpus::{load_benchmark, load_database, BenchmarkExample, CorpusError, DatabaseSchema, Difficulty};
use crate::linker::{link_bidirectional, LinkingResult};
use crate::metrics::{
    aggregate_by_difficulty, check_monotonicity, percent, round2, score_linking, GroupedAggregate,
    LinkingScore,
};
use crate::prompts::PromptSet;
use crate::sqlgen::{execution_accuracy, generate_sql, CompareMode, ExecOptions, GenerationOutcome, Setting};
use crate::sqlscope::{extract_referenced_schema, ScopeReport};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TELEMETRY_FILE: &str = "telemetry.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Records {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Augment,
    Link,
    Score,
    Generate,
    Eval,
}

/// What to do for each selected example. Prerequisites are added
/// automatically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub stages: BTreeSet<Stage>,
    pub settings: Vec<Setting>,
}

impl Plan {
    pub fn new(stages: impl IntoIterator<Item = Stage>, settings: &[Setting]) -> Plan {
        let mut stages: BTreeSet<Stage> = stages.into_iter().collect();
        let mut settings: Vec<Setting> = settings.to_vec();
        settings.sort();
        settings.dedup();
        if settings.is_empty() {
            stages.remove(&Stage::Generate);
            stages.remove(&Stage::Eval);
        }
        if stages.contains(&Stage::Eval) {
            stages.insert(Stage::Generate);
        }
        if stages.contains(&Stage::Generate) {
            stages.insert(Stage::Augment);
            if settings.contains(&Setting::Retrieved) {
                stages.insert(Stage::Link);
            }
        }
        if stages.contains(&Stage::Score) {
            stages.insert(Stage::Link);
        }
        if stages.contains(&Stage::Link) {
            stages.insert(Stage::Augment);
        }
        Plan { stages, settings }
    }

    fn has(&self, s: Stage) -> bool {
        self.stages.contains(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScores {
    pub table_first: LinkingScore,
    pub column_first: LinkingScore,
    pub merged: LinkingScore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

/// Everything recorded about one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: u64,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub question: String,
    pub hint: String,
    pub gold_sql: String,
    #[serde(default)]
    pub gold: Option<ScopeReport>,
    #[serde(default)]
    pub augmented: Option<AugmentedQuestion>,
    #[serde(default)]
    pub augment_events: Vec<Degradation>,
    #[serde(default)]
    pub linking: Option<LinkingResult>,
    #[serde(default)]
    pub scores: Option<PathScores>,
    #[serde(default)]
    pub generations: BTreeMap<Setting, GenerationOutcome>,
    #[serde(default)]
    pub telemetry: Telemetry,
    #[serde(default)]
    pub transcript: Vec<Exchange>,
    #[serde(default)]
    pub errors: Vec<StageError>,
}

impl RunRecord {
    pub fn new(ex: &BenchmarkExample) -> Self {
        RunRecord {
            question_id: ex.question_id,
            db_id: ex.db_id.clone(),
            difficulty: ex.difficulty,
            question: ex.question.clone(),
            hint: ex.hint.clone(),
            gold_sql: ex.gold_sql.clone(),
            gold: None,
            augmented: None,
            augment_events: Vec::new(),
            linking: None,
            scores: None,
            generations: BTreeMap::new(),
            telemetry: Telemetry::default(),
            transcript: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// True when some planned stage has no output yet.
    pub fn needs_work(&self, plan: &Plan) -> bool {
        (plan.has(Stage::Augment) && self.augmented.is_none())
            || (plan.has(Stage::Link) && self.linking.is_none())
            || (plan.has(Stage::Score) && self.scores.is_none())
            || (plan.has(Stage::Generate)
                && plan.settings.iter().any(|s| !self.generations.contains_key(s)))
            || (plan.has(Stage::Eval)
                && plan
                    .settings
                    .iter()
                    .any(|s| self.generations.get(s).is_some_and(|g| !g.evaluated)))
    }

    fn fail(&mut self, stage: &str, message: impl ToString) {
        let message = message.to_string();
        log::warn!("question {} {stage}: {message}", self.question_id);
        self.errors.push(StageError {
            stage: stage.to_string(),
            message,
        });
    }
}

/// Shared, read-only inputs of a run.
pub struct Pipeline<'a> {
    pub client: &'a LlmClient,
    pub prompts: &'a PromptSet,
    pub config: &'a Config,
    pub plan: &'a Plan,
}

impl Pipeline<'_> {
    /// Runs the missing planned stages of one example.
    pub fn process(&self, mut rec: RunRecord, schema: &DatabaseSchema, db_path: &Path) -> RunRecord {
        let plan = self.plan;
        rec.errors.clear();
        let mut session = self.client.session(rec.question_id.to_string());

        let needs_gold = plan.has(Stage::Score)
            || (plan.has(Stage::Generate) && plan.settings.contains(&Setting::Perfect));
        if needs_gold && rec.gold.is_none() {
            match extract_referenced_schema(&rec.gold_sql, schema, self.config.strict_scope) {
                Ok(report) => rec.gold = Some(report),
                Err(e) => rec.fail("gold", e),
            }
        }

        if plan.has(Stage::Augment) && rec.augmented.is_none() {
            let mut events = Vec::new();
            match augment(&rec.question, &rec.hint, &mut session, self.prompts, &mut events) {
                Ok(aug) => {
                    rec.augmented = Some(aug);
                    rec.augment_events = events;
                }
                Err(e) => rec.fail("augment", e),
            }
        }

        if plan.has(Stage::Link) && rec.linking.is_none() {
            if let Some(aug) = &rec.augmented {
                rec.linking = Some(link_bidirectional(
                    schema,
                    aug,
                    &mut session,
                    self.prompts,
                    self.config.linking,
                ));
            }
        }

        if plan.has(Stage::Score) && rec.scores.is_none() {
            if let (Some(link), Some(gold)) = (&rec.linking, &rec.gold) {
                let scored = (|| {
                    let s = PathScores {
                        table_first: score_linking(&link.table_first, &gold.subset, schema)?,
                        column_first: score_linking(&link.column_first, &gold.subset, schema)?,
                        merged: score_linking(&link.merged, &gold.subset, schema)?,
                    };
                    check_monotonicity(&s.merged, &[&s.table_first, &s.column_first])?;
                    Ok::<_, crate::metrics::MetricError>(s)
                })();
                match scored {
                    Ok(s) => rec.scores = Some(s),
                    Err(e) => rec.fail("score", e),
                }
            }
        }

        if plan.has(Stage::Generate) {
            for &setting in &plan.settings {
                if rec.generations.contains_key(&setting) {
                    continue;
                }
                let Some(aug) = rec.augmented.clone() else { break };
                let subset = match setting {
                    Setting::Full => Some(schema.full_subset()),
                    Setting::Perfect => rec.gold.as_ref().map(|g| g.subset.clone()),
                    Setting::Retrieved => rec.linking.as_ref().map(|l| l.merged.clone()),
                };
                let Some(subset) = subset else { continue };
                if subset.is_empty() {
                    rec.fail(setting.tag(), "empty schema subset");
                    continue;
                }
                let outcome = match generate_sql(&subset, schema, &aug, setting, &mut session, self.prompts) {
                    Ok((sql, latency_ms)) => GenerationOutcome {
                        setting,
                        predicted_sql: sql,
                        executed: false,
                        execution_match: false,
                        error_text: None,
                        latency_ms,
                        evaluated: false,
                    },
                    Err(e) => GenerationOutcome {
                        setting,
                        predicted_sql: String::new(),
                        executed: false,
                        execution_match: false,
                        error_text: Some(e.to_string()),
                        latency_ms: 0,
                        evaluated: true,
                    },
                };
                rec.generations.insert(setting, outcome);
            }
        }

        if plan.has(Stage::Eval) {
            let opts = self.config.exec_options();
            let gold_sql = rec.gold_sql.clone();
            let mut gold_failure = None;
            for g in rec.generations.values_mut() {
                if g.evaluated || !plan.settings.contains(&g.setting) {
                    continue;
                }
                match execution_accuracy(&g.predicted_sql, &gold_sql, db_path, opts) {
                    Ok(ex) => {
                        g.executed = ex.executed;
                        g.execution_match = ex.matched;
                        g.error_text = ex.error;
                        g.evaluated = true;
                    }
                    Err(e) => {
                        log::error!("question {}: {e}", rec.question_id);
                        gold_failure = Some(e.to_string());
                        break;
                    }
                }
            }
            if let Some(msg) = gold_failure {
                rec.fail("eval", msg);
            }
        }

        let (telemetry, transcript) = session.into_parts();
        rec.telemetry.merge(&telemetry);
        rec.transcript.extend(transcript);
        rec
    }
}

/// Reads a records file. A truncated final line (an interrupted write) is
/// ignored; later records replace earlier ones with the same id.
pub fn read_records(path: &Path) -> Result<BTreeMap<u64, RunRecord>, RunError> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(rec) => {
                out.insert(rec.question_id, rec);
            }
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring truncated last line ({e})", path.display());
            }
            Err(e) => {
                return Err(RunError::Records {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(io_err(path))
}

pub fn write_records(path: &Path, records: &BTreeMap<u64, RunRecord>) -> Result<(), RunError> {
    let mut buf = Vec::new();
    for rec in records.values() {
        serde_json::to_writer(&mut buf, rec).expect("record serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExCell {
    pub count: usize,
    pub executed: usize,
    pub matched: usize,
    /// Percent of examples whose results matched, two decimals.
    pub ex: f64,
}

impl ExCell {
    fn add(&mut self, g: &GenerationOutcome) {
        self.count += 1;
        self.executed += usize::from(g.executed);
        self.matched += usize::from(g.execution_match);
        self.ex = percent(self.matched as f64 / self.count as f64);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExGroup {
    pub overall: ExCell,
    pub by_difficulty: BTreeMap<Difficulty, ExCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub compare: CompareMode,
    pub settings: IndexMap<Setting, ExGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkingSummary {
    pub table_first: GroupedAggregate,
    pub column_first: GroupedAggregate,
    pub bidirectional: GroupedAggregate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallSummary {
    pub total: u64,
    pub per_example: f64,
    pub by_stage: BTreeMap<String, u64>,
    pub prompt_chars: u64,
    pub response_chars: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub examples: usize,
    pub examples_with_errors: usize,
    pub degradations: usize,
    pub hallucinations_dropped: usize,
    pub linking: Option<LinkingSummary>,
    pub execution: Option<ExecutionSummary>,
    pub calls: CallSummary,
}

pub fn summarize(records: &BTreeMap<u64, RunRecord>, compare: CompareMode) -> Summary {
    let scored: Vec<(Difficulty, &PathScores)> = records
        .values()
        .filter_map(|r| r.scores.as_ref().map(|s| (r.difficulty, s)))
        .collect();
    let linking = if scored.is_empty() {
        None
    } else {
        let path = |f: fn(&PathScores) -> &LinkingScore| {
            let v: Vec<_> = scored.iter().map(|(d, s)| (*d, f(s).clone())).collect();
            aggregate_by_difficulty(&v).expect("non-empty")
        };
        Some(LinkingSummary {
            table_first: path(|s| &s.table_first),
            column_first: path(|s| &s.column_first),
            bidirectional: path(|s| &s.merged),
        })
    };

    let mut settings: IndexMap<Setting, ExGroup> = IndexMap::new();
    for setting in Setting::ALL {
        for r in records.values() {
            if let Some(g) = r.generations.get(&setting).filter(|g| g.evaluated) {
                let group = settings.entry(setting).or_default();
                group.overall.add(g);
                group.by_difficulty.entry(r.difficulty).or_default().add(g);
            }
        }
    }
    let execution = (!settings.is_empty()).then_some(ExecutionSummary { compare, settings });

    let mut calls = CallSummary::default();
    for r in records.values() {
        for (tag, s) in &r.telemetry.stages {
            *calls.by_stage.entry(tag.clone()).or_default() += s.calls;
            calls.total += s.calls;
            calls.prompt_chars += s.prompt_chars;
            calls.response_chars += s.response_chars;
            calls.prompt_tokens += s.prompt_tokens;
            calls.completion_tokens += s.completion_tokens;
        }
    }
    if !records.is_empty() {
        calls.per_example = round2(calls.total as f64 / records.len() as f64);
    }

    Summary {
        examples: records.len(),
        examples_with_errors: records.values().filter(|r| !r.errors.is_empty()).count(),
        degradations: records
            .values()
            .map(|r| {
                r.augment_events.len() + r.linking.as_ref().map_or(0, |l| l.degradation_events.len())
            })
            .sum(),
        hallucinations_dropped: records
            .values()
            .map(|r| r.linking.as_ref().map_or(0, |l| l.dropped_hallucinations.len()))
            .sum(),
        linking,
        execution,
        calls,
    }
}

pub fn read_summary(run_dir: &Path) -> Result<Summary, RunError> {
    let path = run_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|_| {
        RunError::Usage(format!("{} has no {SUMMARY_FILE}; run a pipeline stage first", run_dir.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Records {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Which examples to process and where.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub limit: Option<usize>,
    pub ids: Option<Vec<u64>>,
    pub workers: Option<usize>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub processed: usize,
    pub summary: Summary,
    pub stats: ClientStats,
}

#[derive(Serialize)]
struct Manifest<'a> {
    created_at: String,
    version: &'a str,
    config_digest: String,
    backend: &'a str,
    model: &'a str,
}

/// Creates (or reopens) a run directory and freezes the configuration in it.
pub fn prepare_run_dir(cfg: &Config, explicit: Option<&Path>) -> Result<PathBuf, RunError> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => cfg.runs_root.join(format!(
            "{}-{}",
            chrono::Utc::now().format("%Y%m%dT%H%M%SZ"),
            cfg.digest()
        )),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let frozen = dir.join(CONFIG_FILE);
    if !frozen.exists() {
        write_json(&frozen, cfg)?;
    }
    Ok(dir)
}

/// Reads the configuration frozen in a run directory.
pub fn load_run_config(run_dir: &Path) -> Result<Config, RunError> {
    let mut cfg = Config::load(&run_dir.join(CONFIG_FILE))?;
    cfg.apply_env();
    Ok(cfg)
}

pub fn select_examples(
    mut examples: Vec<BenchmarkExample>,
    ids: Option<&[u64]>,
    limit: Option<usize>,
) -> Vec<BenchmarkExample> {
    if let Some(ids) = ids {
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        examples.retain(|e| wanted.contains(&e.question_id));
    }
    if let Some(n) = limit {
        examples.truncate(n);
    }
    examples
}

/// Runs the planned stages over the selected examples. Already complete
/// records are left alone, so rerunning on a finished directory makes no
/// completion calls.
pub fn run_pipeline(cfg: &Config, plan: &Plan, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let prompts = cfg.prompts()?;
    let run_dir = prepare_run_dir(cfg, opts.run_dir.as_deref())?;
    let client = cfg.client(Some(&run_dir.join("cache")))?;

    let manifest = run_dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        write_json(
            &manifest,
            &Manifest {
                created_at: chrono::Utc::now().to_rfc3339(),
                version: env!("CARGO_PKG_VERSION"),
                config_digest: cfg.digest(),
                backend: client.provider_id(),
                model: client.model(),
            },
        )?;
    }

    let examples = load_benchmark(&cfg.dataset, cfg.format)?;
    let selected = select_examples(examples, opts.ids.as_deref(), opts.limit);

    let records_path = run_dir.join(RECORDS_FILE);
    let mut records = read_records(&records_path)?;

    let jobs: Vec<RunRecord> = selected
        .iter()
        .map(|ex| records.get(&ex.question_id).cloned().unwrap_or_else(|| RunRecord::new(ex)))
        .filter(|r| r.needs_work(plan))
        .collect();

    // Schemas are loaded up front so a bad data root fails before any call.
    let locator = cfg.locator();
    let mut schemas: HashMap<String, (DatabaseSchema, PathBuf)> = HashMap::new();
    for job in &jobs {
        if !schemas.contains_key(&job.db_id) {
            let path = locator.path_for(&job.db_id);
            let schema = load_database(&path, &cfg.samples)?;
            schemas.insert(job.db_id.clone(), (schema, path));
        }
    }

    let pipeline = Pipeline {
        client: &client,
        prompts: &prompts,
        config: cfg,
        plan,
    };
    let workers = opts.workers.unwrap_or(cfg.workers).max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunRecord>();
    let mut append = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(io_err(&records_path))?;
    let mut write_error = None;
    let processed = jobs.len();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, pipeline, schemas) = (&jobs, &next, &pipeline, &schemas);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let (schema, path) = &schemas[&job.db_id];
                let rec = pipeline.process(job.clone(), schema, path);
                if tx.send(rec).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: records are appended as they complete.
        for rec in rx {
            let mut line = serde_json::to_vec(&rec).expect("record serializes");
            line.push(b'\n');
            if let Err(e) = append.write_all(&line).and_then(|_| append.flush()) {
                write_error.get_or_insert(e);
            }
            log::info!("question {} done", rec.question_id);
            records.insert(rec.question_id, rec);
        }
    });
    if let Some(e) = write_error {
        return Err(io_err(&records_path)(e));
    }
    drop(append);

    write_records(&records_path, &records)?;
    let summary = summarize(&records, cfg.generation.compare);
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    let stats = client.stats();
    write_json(&run_dir.join(TELEMETRY_FILE), &stats)?;
    Ok(RunOutcome {
        run_dir,
        processed,
        summary,
        stats,
    })
}

/// Recomputes the summary from an existing records file.
pub fn refresh_summary(run_dir: &Path, compare: CompareMode) -> Result<Summary, RunError> {
    let records = read_records(&run_dir.join(RECORDS_FILE))?;
    let summary = summarize(&records, compare);
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Execution options as frozen in a run's configuration.
pub fn exec_options_of(run_dir: &Path) -> Result<ExecOptions, RunError> {
    Ok(load_run_config(run_dir)?.exec_options())
}
