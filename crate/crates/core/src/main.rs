use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use schemalink::config::Config;
use schemalink::corpus::introspect_schema;
use schemalink::report::{self, ReportFormat};
use schemalink::run::{self, Plan, RunOptions, Stage};
use schemalink::sqlgen::{CompareMode, Setting};
use schemalink::sqlscope::extract_referenced_schema;

#[derive(Parser, Debug)]
#[command(name = "schemalink", version, about = "Bidirectional schema linking for Text-to-SQL")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file (JSON).
    #[arg(long, global = true, env = "SCHEMALINK_CONFIG")]
    config: Option<PathBuf>,
    /// Run directory to create or resume.
    #[arg(long, global = true, visible_aliases = ["run", "out"])]
    run_dir: Option<PathBuf>,
    /// Process only the first N selected examples.
    #[arg(long, global = true)]
    limit: Option<usize>,
    /// Comma-separated question ids to process.
    #[arg(long, global = true, value_delimiter = ',')]
    ids: Option<Vec<u64>>,
    /// Backend to use: `replay` or a configured provider name.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the tables and columns a query references.
    Scope {
        /// Database id (resolved through the config) or path to a SQLite file.
        #[arg(long)]
        db: String,
        /// SQL text, or a path to a file containing it.
        #[arg(long)]
        sql: String,
        /// Fail on identifiers that cannot be resolved.
        #[arg(long)]
        strict: bool,
    },
    /// Augment questions with subquestions and keywords.
    Augment(DatasetArg),
    /// Run table-first and column-first linking and merge the results.
    Link(DatasetArg),
    /// Score linking against gold schemas and print the linking table.
    EvalLinking(DatasetArg),
    /// Generate SQL under one or more schema settings.
    Generate(SettingArgs),
    /// Execute generated SQL and print execution accuracy.
    EvalSql {
        #[command(flatten)]
        settings: SettingArgs,
        /// Row comparison for execution accuracy.
        #[arg(long, value_enum)]
        compare: Option<CompareMode>,
    },
    /// Run every stage configured.
    Run(DatasetArg),
    /// Render the summary of a run.
    Report {
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
}

#[derive(Args, Debug)]
struct DatasetArg {
    /// Benchmark file overriding the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SettingArgs {
    /// Schema settings; defaults to those in the config.
    #[arg(long = "setting", value_enum, value_delimiter = ',')]
    settings: Vec<Setting>,
}

fn load_config(g: &Global, dataset: Option<&Path>) -> Result<Config> {
    let mut cfg = match (&g.config, &g.run_dir) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(dir)) if dir.join(run::CONFIG_FILE).exists() => run::load_run_config(dir)?,
        _ => bail!("no configuration: pass --config, or --run-dir of an existing run"),
    };
    if let Some(b) = &g.backend {
        cfg.backend = b.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(d) = dataset {
        cfg.dataset = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(g: &Global, cfg: &Config, plan: Plan) -> Result<run::RunOutcome> {
    let opts = RunOptions {
        run_dir: g.run_dir.clone(),
        limit: g.limit,
        ids: g.ids.clone(),
        workers: g.workers,
    };
    let out = run::run_pipeline(cfg, &plan, &opts)?;
    eprintln!(
        "{}: {} example(s) processed, {} provider call(s), {} cache hit(s)",
        out.run_dir.display(),
        out.processed,
        out.stats.provider_calls,
        out.stats.cache_hits
    );
    if out.summary.examples_with_errors > 0 {
        eprintln!(
            "warning: {} example(s) recorded errors; see records.jsonl",
            out.summary.examples_with_errors
        );
    }
    Ok(out)
}

fn settings_or_config(args: &SettingArgs, cfg: &Config) -> Result<Vec<Setting>> {
    let s = if args.settings.is_empty() {
        cfg.generation.settings.clone()
    } else {
        args.settings.clone()
    };
    if s.is_empty() {
        bail!("no schema setting given; pass --setting or set generation.settings");
    }
    Ok(s)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let g = &cli.global;

    match &cli.command {
        Command::Scope { db, sql, strict } => {
            let db_path = if Path::new(db).is_file() {
                PathBuf::from(db)
            } else {
                load_config(g, None)?.locator().path_for(db)
            };
            let schema = introspect_schema(&db_path)?;
            let text = if Path::new(sql).is_file() {
                std::fs::read_to_string(sql).with_context(|| format!("reading {sql}"))?
            } else {
                sql.clone()
            };
            let report = extract_referenced_schema(&text, &schema, *strict)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Augment(d) => {
            let cfg = load_config(g, d.dataset.as_deref())?;
            execute(g, &cfg, Plan::new([Stage::Augment], &[]))?;
        }
        Command::Link(d) => {
            let cfg = load_config(g, d.dataset.as_deref())?;
            execute(g, &cfg, Plan::new([Stage::Link], &[]))?;
        }
        Command::EvalLinking(d) => {
            let cfg = load_config(g, d.dataset.as_deref())?;
            let out = execute(g, &cfg, Plan::new([Stage::Score], &[]))?;
            print!("{}", report::linking_text(&out.summary));
        }
        Command::Generate(args) => {
            let cfg = load_config(g, None)?;
            let settings = settings_or_config(args, &cfg)?;
            execute(g, &cfg, Plan::new([Stage::Generate], &settings))?;
        }
        Command::EvalSql { settings, compare } => {
            let mut cfg = load_config(g, None)?;
            if let Some(c) = compare {
                cfg.generation.compare = *c;
            }
            let settings = settings_or_config(settings, &cfg)?;
            let out = execute(g, &cfg, Plan::new([Stage::Eval], &settings))?;
            print!("{}", report::execution_text(&out.summary));
        }
        Command::Run(d) => {
            let cfg = load_config(g, d.dataset.as_deref())?;
            let settings = cfg.generation.settings.clone();
            let out = execute(
                g,
                &cfg,
                Plan::new(
                    [Stage::Augment, Stage::Link, Stage::Score, Stage::Generate, Stage::Eval],
                    &settings,
                ),
            )?;
            print!("{}", report::render(&out.summary, ReportFormat::Text));
        }
        Command::Report { format } => {
            let Some(dir) = &g.run_dir else {
                bail!("report needs --run-dir");
            };
            let summary = run::read_summary(dir)?;
            print!("{}", report::render(&summary, *format));
        }
    }
    Ok(())
}
