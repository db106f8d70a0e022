use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use matkg_core::gateway::{Mode, ProviderConfig};
use matkg_core::graph::Pipeline;
use matkg_core::ingest::TextFormat;
use matkg_core::run::{eval_pair, load_policy, RunConfig, RunError, Runner};

/// Structured-data and knowledge-graph extraction from materials papers.
#[derive(Parser)]
#[command(name = "matkg", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Gateway mode; overrides the config file.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a plain or markdown paper into `<id>.doc.json`.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        format: Option<TextFormat>,
    },
    /// Extract property tables from a document, one prompt per section.
    Extract {
        doc: PathBuf,
        /// Template name or path.
        #[arg(long)]
        template: Option<String>,
    },
    /// Build a knowledge graph with one strategy.
    Kg {
        doc: PathBuf,
        #[arg(long, default_value = "gen2")]
        strategy: Pipeline,
    },
    /// Score one candidate against one reference.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "cand")]
        candidate: PathBuf,
        /// Normalization policy (JSON).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Score every pair listed in a corpus manifest.
    EvalCorpus {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Render a KG JSON file as Graphviz DOT.
    ExportDot {
        kg: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Inspect or extend the fixture store.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Subcommand)]
enum FixturesAction {
    /// List recorded fixtures.
    List,
    /// Send one prompt (file, or `-` for stdin) and record the answer.
    Record { prompt: PathBuf },
}

fn config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut c = RunConfig::new(ProviderConfig::openai("gpt-3.5-turbo-1106"));
            c.mode = Mode::Live;
            c.fixtures_dir = Some(PathBuf::from("fixtures"));
            c
        }
    };
    if let Some(mode) = cli.mode {
        config.mode = mode;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn read_prompt(path: &Path) -> Result<String, RunError> {
    let mut text = String::new();
    let result = if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text).map(|_| ())
    } else {
        std::fs::read_to_string(path).map(|t| text = t)
    };
    result.map_err(|source| RunError::FileUnreadable { path: path.to_path_buf(), source })?;
    Ok(text)
}

fn run(cli: Cli) -> Result<(), RunError> {
    let mut config = config(&cli)?;
    if let Command::Fixtures { action: FixturesAction::Record { .. } } = &cli.command {
        config.mode = Mode::Cache;
    }
    if let Command::Eval { reference, candidate, policy } = &cli.command {
        let policy = match policy {
            Some(p) => load_policy(p)?,
            None => config.normalization.clone(),
        };
        let report = eval_pair(reference, candidate, &policy)?;
        print!("{}", report.to_text());
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    let runner = Runner::new(config)?;
    match cli.command {
        Command::Ingest { input, format } => {
            let out = runner.ingest(&input, format)?;
            for d in &out.document.diagnostics {
                eprintln!("warning: {d}");
            }
            println!("{}", out.path.display());
        }
        Command::Extract { doc, template } => match runner.extract(&doc, template.as_deref()) {
            Ok(out) => {
                for d in &out.manifest.diagnostics {
                    eprintln!("note: {d}");
                }
                let count: usize = out.tables.iter().map(|t| t.records.len()).sum();
                println!("{} tables, {count} records", out.tables.len());
                println!("{}", out.json_path.display());
                println!("{}", out.csv_path.display());
            }
            Err(RunError::Extract { error, diagnostics }) => {
                for d in &diagnostics {
                    eprintln!("note: {d}");
                }
                return Err(RunError::Extract { error, diagnostics });
            }
            Err(e) => return Err(e),
        },
        Command::Kg { doc, strategy } => {
            let out = runner.kg(&doc, strategy)?;
            for d in &out.manifest.diagnostics {
                eprintln!("note: {d}");
            }
            print!("{}", out.rubric.to_text());
            println!("{}", out.dir.display());
        }
        Command::EvalCorpus { manifest } => {
            let out = runner.eval_corpus(&manifest)?;
            print!("{}", out.report.to_text());
        }
        Command::ExportDot { kg, output } => {
            let (path, _) = runner.export_dot(&kg, output.as_deref())?;
            println!("{}", path.display());
        }
        Command::Fixtures { action: FixturesAction::List } => {
            for f in runner.list_fixtures()? {
                println!("{}  {}  {}", f.digest, f.model_id, f.recorded_at);
            }
        }
        Command::Fixtures { action: FixturesAction::Record { prompt } } => {
            let digest = runner.record_prompt(&read_prompt(&prompt)?)?;
            println!("{digest}");
        }
        Command::Eval { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
