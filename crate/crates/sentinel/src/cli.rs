//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sentinel_core::gateway::{Gateway, Transport};
use sentinel_core::pipeline::Pipeline;
use sentinel_core::rulebook::{extract_rules, PolicyDocument, RuleBook};
use sentinel_core::taxonomy::SensitivityLevel;

use crate::backends::{resolve_bindings, BackendSet};
use crate::config::SentinelConfig;
use crate::error::{AppError, AppResult};
use crate::scan::{evaluate, execute_scan, EvaluateRequest, ScanRequest};

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Contextual sensitive-data detection for tabular datasets")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a pipeline over a corpus manifest and write verdict files.
    Scan(ScanArgs),
    /// Score a scan directory against gold labels.
    Evaluate(EvaluateArgs),
    /// Rulebook management.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Run the HTTP review service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Backend for a model stage: `<stage>=<id>` or `<id>` for every stage.
    /// Ids: `replay:<fixture>`, `record:<fixture>+<id>`, `mock:<script.json>`, `remote`.
    #[arg(long = "backend", value_name = "[STAGE=]ID")]
    pub backends: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Corpus manifest (JSON Lines).
    pub manifest: PathBuf,
    #[arg(long, value_name = "NAME")]
    pub pipeline: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Output directory for verdict files and the run manifest.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scan output directory.
    pub scan: PathBuf,
    /// Gold labels (JSON Lines). Defaults to the gold files named by the
    /// scan's corpus manifest.
    #[arg(long, value_name = "FILE")]
    pub gold: Option<PathBuf>,
    /// Second scan directory to compare against the first.
    #[arg(long, value_name = "DIR")]
    pub compare: Option<PathBuf>,
    /// Count the `none` type class in averaged type metrics.
    #[arg(long)]
    pub include_none: bool,
    /// Directory for report.json and report.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Extract a rulebook from a plain-text policy document.
    Extract(ExtractArgs),
    /// Check rulebook files against the schema.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Policy document (plain text).
    pub document: PathBuf,
    /// ISO country code the rulebook applies to.
    #[arg(long)]
    pub country: String,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Where to write the rulebook.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on.
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
    /// Directory for scan outputs, jobs and the review log.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Static UI assets to serve.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    /// Register a corpus as `name=manifest`.
    #[arg(long = "corpus", value_name = "NAME=MANIFEST")]
    pub corpora: Vec<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|e| AppError::Invalid(format!("writing output: {e}")))
}

/// Runs a parsed command, writing results to `out`.
pub fn run(cli: Cli, transport: Arc<dyn Transport>, out: &mut dyn Write) -> AppResult<()> {
    let mut config = SentinelConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Scan(args) => {
            let pipeline = match args.pipeline.as_deref() {
                Some(p) => p.parse::<Pipeline>()?,
                None => config
                    .pipeline
                    .ok_or_else(|| AppError::Usage("no pipeline given (use --pipeline or set it in the config)".into()))?,
            };
            let manifest = execute_scan(
                &ScanRequest {
                    manifest: &args.manifest,
                    pipeline,
                    backends: &args.backend.backends,
                    out: &args.out,
                    config: &config,
                },
                transport,
            )?;
            print_json(out, &manifest)
        }
        Command::Evaluate(args) => {
            let result = evaluate(&EvaluateRequest {
                scan: &args.scan,
                gold: args.gold.as_deref(),
                compare: args.compare.as_deref(),
                include_none: args.include_none,
                config: &config,
            })?;
            if let Some(dir) = &args.out {
                result.write(dir)?;
            }
            write!(out, "{}", result.render_text()).map_err(|e| AppError::Invalid(format!("writing output: {e}")))
        }
        Command::Rules(RulesCommand::Extract(args)) => rules_extract(&args, &config, transport, out),
        Command::Rules(RulesCommand::Validate(args)) => rules_validate(&args.files, out),
        Command::Serve(args) => {
            if let Some(b) = args.bind {
                config.service.bind = b;
            }
            if let Some(d) = args.data_dir {
                config.service.data_dir = d;
            }
            if let Some(d) = args.ui_dir {
                config.service.ui_dir = Some(d);
            }
            for c in &args.corpora {
                let (name, path) = c
                    .split_once('=')
                    .ok_or_else(|| AppError::Usage(format!("--corpus expects NAME=MANIFEST, got {c:?}")))?;
                config.service.corpora.insert(name.to_string(), PathBuf::from(path));
            }
            config.backends = resolve_bindings(&config.backends, &args.backend.backends)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Invalid(format!("starting runtime: {e}")))?;
            runtime.block_on(crate::service::serve(config, transport))
        }
    }
}

#[derive(Serialize)]
struct ExtractSummary<'a> {
    out: &'a Path,
    country: &'a str,
    rules: BTreeMap<&'static str, usize>,
    dropped: Vec<DroppedSummary>,
}

#[derive(Serialize)]
struct DroppedSummary {
    level: SensitivityLevel,
    text: String,
    provenance: String,
}

fn rules_extract(args: &ExtractArgs, config: &SentinelConfig, transport: Arc<dyn Transport>, out: &mut dyn Write) -> AppResult<()> {
    let doc = PolicyDocument::from_file(&args.document, Some(&args.country))?;
    let bindings = resolve_bindings(&config.backends, &args.backend.backends)?;
    let set = BackendSet::build(&bindings, &["extract"], transport)?;
    let mut gateway = Gateway::new(config.engine.gateway.clone());
    set.register(&mut gateway, &config.engine);
    let result = extract_rules(&doc, &gateway, "extract");
    set.flush()?;
    let extraction = result?;
    extraction.rulebook.save(&args.out)?;
    let rules = SensitivityLevel::ALL
        .iter()
        .map(|l| (l.as_str(), extraction.rulebook.rules_at(*l).len()))
        .collect();
    print_json(
        out,
        &ExtractSummary {
            out: &args.out,
            country: &extraction.rulebook.country,
            rules,
            dropped: extraction
                .dropped
                .into_iter()
                .map(|d| DroppedSummary {
                    level: d.level,
                    text: d.text,
                    provenance: d.provenance,
                })
                .collect(),
        },
    )
}

#[derive(Serialize)]
struct ValidSummary {
    file: PathBuf,
    country: String,
    rules: BTreeMap<&'static str, usize>,
}

/// Validates every file; the first invalid one fails the command.
fn rules_validate(files: &[PathBuf], out: &mut dyn Write) -> AppResult<()> {
    let mut summaries = Vec::new();
    for file in files {
        let book = RuleBook::load(file)?;
        summaries.push(ValidSummary {
            file: file.clone(),
            country: book.country.clone(),
            rules: SensitivityLevel::ALL.iter().map(|l| (l.as_str(), book.rules_at(*l).len())).collect(),
        });
    }
    print_json(out, &summaries)
}
