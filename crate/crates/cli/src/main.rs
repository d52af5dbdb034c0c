//! `privgemo` command line: ingest graphs, answer questions, evaluate
//! fixture suites, and manage the experience memory store.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 runtime failure, 2 input/configuration error, 3 missing memory key.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use privgemo::anonymize::{DateGranularity, RelationMode};
use privgemo::config::EngineConfig;
use privgemo::controller::Engine;
use privgemo::eval::{load_questions, run_eval};
use privgemo::gateway::http::HttpChatBackend;
use privgemo::gateway::mock::Scenario;
use privgemo::gateway::{ChatBackend, GatewayHandles, HashEmbedder};
use privgemo::grounding::Question;
use privgemo::kg::{GraphFormat, KnowledgeGraph};
use privgemo::memory::{MemoryStore, MEMORY_KEY_ENV};

#[derive(Parser)]
#[command(name = "privgemo", version, about = "Privacy-preserving KG question answering")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct PrivacyOverrides {
    /// Anonymization ratio in [0,1].
    #[arg(long = "privacy.ratio")]
    ratio: Option<f64>,
    /// Relation exposure: utility | privacy.
    #[arg(long = "privacy.relation_mode")]
    relation_mode: Option<String>,
    /// Entity budget after sanitization.
    #[arg(long = "privacy.node_budget")]
    node_budget: Option<usize>,
    /// Minimum class size for supernode clustering.
    #[arg(long = "privacy.cluster_min_size")]
    cluster_min_size: Option<usize>,
    /// Date coarsening: year | month | full.
    #[arg(long = "privacy.date_granularity")]
    date_granularity: Option<String>,
    /// Numeric bucket width.
    #[arg(long = "privacy.number_bucket_width")]
    number_bucket_width: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load a graph file and print its statistics.
    Ingest {
        graph: PathBuf,
        /// Input format: tsv | ntriples.
        #[arg(long, default_value = "tsv")]
        format: String,
    },
    /// Answer one question over a graph.
    Ask {
        graph: PathBuf,
        question: String,
        /// Scripted backend scenario (cases, table6..table10, adversarial).
        #[arg(long)]
        mock: Option<String>,
        /// Write the run transcript (newline-delimited JSON) here.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Question id used in the transcript and memory.
        #[arg(long, default_value = "cli")]
        id: String,
        /// Persistent memory store directory (requires the key file).
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        privacy: PrivacyOverrides,
    },
    /// Evaluate a newline-delimited question file; prints a table and
    /// writes a JSON report.
    Eval {
        graph: PathBuf,
        questions: PathBuf,
        #[arg(long)]
        mock: Option<String>,
        /// JSON report output path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Comma-separated anonymization ratios to sweep.
        #[arg(long = "ratio-sweep")]
        ratio_sweep: Option<String>,
        /// Worker pool size (1 = deterministic ordering).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        privacy: PrivacyOverrides,
    },
    /// Inspect or move the experience memory store.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
        /// Store directory.
        #[arg(long, global = true, default_value = ".privgemo/memory")]
        store: PathBuf,
    },
}

#[derive(Subcommand)]
enum MemoryAction {
    /// Print record count, decrypted top templates, and buffer stats.
    Inspect,
    /// Export the store to one JSON file.
    Export { out: PathBuf },
    /// Import records from an exported JSON file.
    Import { input: PathBuf },
    /// Drop all records (exemplars reseed on the next run).
    Clear,
}

fn main() -> ExitCode {
    // Die quietly when a pipe closes (e.g. `privgemo eval ... | head`).
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { graph, format } => ingest(&graph, &format),
        Command::Ask {
            graph,
            question,
            mock,
            transcript,
            id,
            store,
            privacy,
        } => ask(config, &graph, &question, mock, transcript, &id, store, privacy),
        Command::Eval {
            graph,
            questions,
            mock,
            report,
            ratio_sweep,
            workers,
            store,
            privacy,
        } => eval(
            config, &graph, &questions, mock, report, ratio_sweep, workers, store, privacy,
        ),
        Command::Memory { action, store } => memory_cmd(config, action, &store),
    }
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("cannot parse config {}", p.display()))
        }
        None => Ok(EngineConfig::default()),
    }
}

fn apply_privacy(config: &mut EngineConfig, overrides: &PrivacyOverrides) -> Result<()> {
    if let Some(r) = overrides.ratio {
        config.privacy.anonymization_ratio = r;
    }
    if let Some(mode) = &overrides.relation_mode {
        config.privacy.relation_mode = match mode.as_str() {
            "utility" => RelationMode::Utility,
            "privacy" => RelationMode::Privacy,
            other => return Err(anyhow!("unknown relation mode {other:?}")),
        };
    }
    if let Some(b) = overrides.node_budget {
        config.privacy.node_budget = b;
    }
    if let Some(c) = overrides.cluster_min_size {
        config.privacy.cluster_min_size = c;
    }
    if let Some(g) = &overrides.date_granularity {
        config.privacy.date_granularity = match g.as_str() {
            "year" => DateGranularity::Year,
            "month" => DateGranularity::Month,
            "full" => DateGranularity::Full,
            other => return Err(anyhow!("unknown date granularity {other:?}")),
        };
    }
    if let Some(w) = overrides.number_bucket_width {
        config.privacy.number_bucket_width = w;
    }
    Ok(())
}

fn load_graph(path: &Path, format: GraphFormat) -> Result<KnowledgeGraph, ExitCode> {
    if !path.exists() {
        eprintln!("error: graph file {} does not exist", path.display());
        return Err(ExitCode::from(2));
    }
    KnowledgeGraph::load(path, format).map_err(|e| {
        eprintln!("error: cannot load {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn parse_format(format: &str) -> Result<GraphFormat> {
    match format {
        "tsv" => Ok(GraphFormat::Tsv),
        "ntriples" => Ok(GraphFormat::NTriplesSubset),
        other => Err(anyhow!("unknown graph format {other:?}")),
    }
}

fn build_gateways(config: &EngineConfig, mock: Option<&str>) -> Result<GatewayHandles, ExitCode> {
    if let Some(name) = mock {
        let Some(scenario) = Scenario::parse(name) else {
            eprintln!("error: unknown mock scenario {name:?}");
            return Err(ExitCode::from(2));
        };
        return Ok(GatewayHandles::scripted(scenario));
    }
    if config.hand.endpoint.is_empty() {
        eprintln!("error: no backend configured; pass --mock or set [hand]/[brain] endpoints");
        return Err(ExitCode::from(2));
    }
    let hand: Arc<dyn ChatBackend> = Arc::new(HttpChatBackend::new(
        &config.hand.endpoint,
        &config.hand.model,
        None,
    ));
    let brain: Option<Arc<dyn ChatBackend>> = if config.brain.endpoint.is_empty() {
        None
    } else {
        Some(Arc::new(HttpChatBackend::from_env(
            &config.brain.endpoint,
            &config.brain.model,
        )))
    };
    Ok(GatewayHandles {
        brain,
        hand,
        embedder: Arc::new(HashEmbedder::default()),
    })
}

/// Opens a persistent store when a directory and key are available,
/// otherwise a volatile one (noted on stderr).
fn open_memory(config: &EngineConfig, store: Option<&Path>) -> Result<MemoryStore> {
    match store {
        Some(dir) => match MemoryStore::key_from_env() {
            Ok(key) => MemoryStore::open(dir, key, &config.limits).map_err(|e| anyhow!(e)),
            Err(e) => {
                eprintln!("note: {e}; using a volatile in-memory store");
                Ok(MemoryStore::in_memory([0u8; 32], &config.limits))
            }
        },
        None => Ok(MemoryStore::in_memory([0u8; 32], &config.limits)),
    }
}

fn ingest(graph_path: &Path, format: &str) -> Result<ExitCode> {
    let format = parse_format(format)?;
    let graph = match load_graph(graph_path, format) {
        Ok(g) => g,
        Err(code) => return Ok(code),
    };
    println!(
        "entities={} relations={} triples={} duplicate_warnings={}",
        graph.entity_count(),
        graph.relation_count(),
        graph.triple_count(),
        graph.duplicate_warnings()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn ask(
    mut config: EngineConfig,
    graph_path: &Path,
    question_text: &str,
    mock: Option<String>,
    transcript_out: Option<PathBuf>,
    id: &str,
    store: Option<PathBuf>,
    privacy: PrivacyOverrides,
) -> Result<ExitCode> {
    apply_privacy(&mut config, &privacy)?;
    let graph = match load_graph(graph_path, GraphFormat::Tsv) {
        Ok(g) => g,
        Err(code) => return Ok(code),
    };
    let gateways = match build_gateways(&config, mock.as_deref()) {
        Ok(g) => g,
        Err(code) => return Ok(code),
    };
    let mut memory = open_memory(&config, store.as_deref())?;
    let engine = Engine::new(Arc::new(graph), config, gateways);
    let question = Question::new(id, question_text);
    match engine.run(&question, &mut memory) {
        Ok(result) => {
            println!(
                "answer: {}",
                if result.answers.is_empty() {
                    "(none)".to_string()
                } else {
                    result.answers.join("; ")
                }
            );
            for fact in &result.evidence {
                println!("evidence: {fact}");
            }
            if let Some(source) = result.answer_source {
                println!("source: {source:?}");
            }
            println!(
                "exposure: kg_expansions={} brain_calls={} hand_calls={} node_reduction={:.3}",
                result.exposure.kg_expansions,
                result.exposure.brain_calls,
                result.exposure.hand_calls,
                result.node_reduction_ratio()
            );
            if let Some(path) = transcript_out {
                std::fs::write(&path, result.transcript.to_ndjson())
                    .with_context(|| format!("cannot write {}", path.display()))?;
                eprintln!("transcript written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(err) => {
            eprintln!("error: {err}");
            Ok(ExitCode::from(1))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn eval(
    mut config: EngineConfig,
    graph_path: &Path,
    questions_path: &Path,
    mock: Option<String>,
    report_out: Option<PathBuf>,
    ratio_sweep: Option<String>,
    workers: usize,
    store: Option<PathBuf>,
    privacy: PrivacyOverrides,
) -> Result<ExitCode> {
    apply_privacy(&mut config, &privacy)?;
    let graph = match load_graph(graph_path, GraphFormat::Tsv) {
        Ok(g) => g,
        Err(code) => return Ok(code),
    };
    if !questions_path.exists() {
        eprintln!("error: questions file {} does not exist", questions_path.display());
        return Ok(ExitCode::from(2));
    }
    let questions = load_questions(questions_path)
        .with_context(|| format!("cannot read {}", questions_path.display()))?;
    let gateways = match build_gateways(&config, mock.as_deref()) {
        Ok(g) => g,
        Err(code) => return Ok(code),
    };
    let graph = Arc::new(graph);

    if let Some(sweep) = ratio_sweep {
        // One fresh engine and memory per ratio: the desk-scale analogue
        // of the anonymization-ratio study.
        println!("ratio  hits@1  mean_brain_calls");
        for token in sweep.split(',') {
            let ratio: f64 = token
                .trim()
                .parse()
                .map_err(|_| anyhow!("bad ratio {token:?} in sweep"))?;
            let mut c = config.clone();
            c.privacy.anonymization_ratio = ratio;
            let engine = Engine::new(graph.clone(), c.clone(), gateways.clone());
            let mut memory = open_memory(&c, None)?;
            let report = run_eval(&engine, &questions, &mut memory, workers);
            println!(
                "{ratio:<6} {}  {:.2}",
                report
                    .aggregate
                    .hits_at_1
                    .map(|h| format!("{h:.3}"))
                    .unwrap_or_else(|| "n/a".into()),
                report.aggregate.mean_brain_calls
            );
        }
        return Ok(ExitCode::SUCCESS);
    }

    let engine = Engine::new(graph, config.clone(), gateways);
    let mut memory = open_memory(&config, store.as_deref())?;
    let report = run_eval(&engine, &questions, &mut memory, workers);
    print!("{}", report.render_table());
    if let Some(path) = report_out {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        eprintln!("report written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn memory_cmd(config: EngineConfig, action: MemoryAction, store: &Path) -> Result<ExitCode> {
    let key = match MemoryStore::key_from_env() {
        Ok(key) => key,
        Err(e) => {
            eprintln!("error: {e} (set {MEMORY_KEY_ENV} to a key file path)");
            return Ok(ExitCode::from(3));
        }
    };
    let mut memory = MemoryStore::open(store, key, &config.limits)?;
    if memory.is_fresh() {
        memory.seed_cold_start(&HashEmbedder::default());
    }
    match action {
        MemoryAction::Inspect => {
            println!("records: {}", memory.record_count());
            println!("buffer_entries: {}", memory.buffer.len());
            let mut by_hits: Vec<_> = memory.pool.records().to_vec();
            by_hits.sort_by_key(|r| std::cmp::Reverse(r.hits()));
            for record in by_hits.iter().take(10) {
                println!(
                    "id={} hits={} d_predict={} indicator={:?} templates={:?}",
                    record.id,
                    record.hits(),
                    record.d_predict,
                    record.anon_indicator,
                    record.path_templates
                );
            }
        }
        MemoryAction::Export { out } => {
            memory.export(&out)?;
            println!("exported {} records to {}", memory.record_count(), out.display());
        }
        MemoryAction::Import { input } => {
            let n = memory.import(&input)?;
            println!("imported {n} records; store now has {}", memory.record_count());
        }
        MemoryAction::Clear => {
            memory.clear()?;
            println!("records: 0");
        }
    }
    Ok(ExitCode::SUCCESS)
}
