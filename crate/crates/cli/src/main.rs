use clap::{Args, Parser, Subcommand};
use graphmatch_cli::service::{self, ServeConfig, Service};
use graphmatch_cli::stages::{self, write_json, StageConfigs};
use graphmatch_core::eval::format_table;
use graphmatch_core::negmine::SearchKind;
use graphmatch_core::{NodeRef, NodeType};
use serde::Serialize;
use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "graphmatch", version, about = "Temporal graph matching pipeline and embedding service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with any of the sections world, text, mine, model, train, eval.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> graphmatch_core::Result<StageConfigs> {
        let cfg = StageConfigs::load(self.config.as_deref())?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Search {
    Exact,
    Forest,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic marketplace dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the two-stage text encoder.
    TrainText {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach text embeddings to every stored version.
    EmbedAll {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        text_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine adversarial and random negatives for the training labels.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        search: Option<Search>,
    },
    /// Train the graph model.
    TrainGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        quintuples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "GraphMatch")]
        variant: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint next to the text-only baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "GraphMatch")]
        label: String,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        quintuples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print one embedding.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_node_type)]
        node_type: NodeType,
        #[arg(long)]
        node_id: u32,
        /// Seconds since the epoch; defaults to now.
        #[arg(long)]
        timestamp: Option<f64>,
    },
    /// Serve embeddings over newline-delimited JSON on TCP.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Describe a dataset, checkpoint, text model, quintuple file or report.
    Inspect { path: PathBuf },
}

fn parse_node_type(s: &str) -> Result<NodeType, String> {
    NodeType::parse(s).ok_or_else(|| format!("expected freelancer, client or job_post, got {s:?}"))
}

fn print<T: Serialize>(value: &T) -> graphmatch_core::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    // a closed pipe downstream is not a stage failure
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn run(command: Command) -> Result<(), (&'static str, graphmatch_core::Error)> {
    match command {
        Command::Gen { common, out } => {
            let r = common.load().and_then(|c| stages::gen(&c, &out));
            r.and_then(|m| print(&m)).map_err(|e| ("gen", e))
        }
        Command::TrainText { common, data, out } => {
            let r = common.load().and_then(|c| stages::train_text(&c, &data, &out));
            r.and_then(|s| print(&s)).map_err(|e| ("train-text", e))
        }
        Command::EmbedAll { data, text_model, out } => stages::embed_all(&data, &text_model, &out)
            .and_then(|m| print(&m))
            .map_err(|e| ("embed-all", e)),
        Command::Mine {
            common,
            data,
            out,
            search,
        } => {
            let r = common.load().and_then(|mut c| {
                match search {
                    Some(Search::Exact) => c.mine.search = SearchKind::Exact,
                    Some(Search::Forest) => c.mine.search = SearchKind::default_forest(),
                    None => {}
                }
                stages::mine(&c, &data, &out)
            });
            r.and_then(|rep| print(&rep)).map_err(|e| ("mine", e))
        }
        Command::TrainGraph {
            common,
            data,
            quintuples,
            out,
            variant,
            steps,
        } => {
            let r = common.load().and_then(|mut c| {
                if let Some(s) = steps {
                    c.train.steps = s;
                }
                stages::train_graph(&c, &variant, &data, &quintuples, &out)
            });
            r.and_then(|s| print(&s)).map_err(|e| ("train-graph", e))
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
            k,
            label,
        } => {
            let r = common.load().and_then(|mut c| {
                if let Some(k) = k {
                    c.eval.k = k;
                }
                let reports = stages::eval(&c, &data, &checkpoint, &label)?;
                if let Some(p) = &out {
                    write_json(p, &reports)?;
                }
                eprint!("{}", format_table(&reports));
                Ok(reports)
            });
            r.and_then(|rs| print(&rs)).map_err(|e| ("eval", e))
        }
        Command::Ablate {
            common,
            data,
            quintuples,
            out,
            steps,
        } => {
            let r = common.load().and_then(|mut c| {
                if let Some(s) = steps {
                    c.train.steps = s;
                }
                let rows = stages::ablate(&c, &data, &quintuples)?;
                if let Some(p) = &out {
                    write_json(p, &rows)?;
                }
                let reports: Vec<_> = rows.iter().map(|r| r.report.clone()).collect();
                eprint!("{}", format_table(&reports));
                Ok(rows)
            });
            r.and_then(|rows| print(&rows)).map_err(|e| ("ablate", e))
        }
        Command::Embed {
            data,
            checkpoint,
            node_type,
            node_id,
            timestamp,
        } => stages::embed(&data, &checkpoint, NodeRef::new(node_type, node_id), timestamp)
            .and_then(|o| print(&o))
            .map_err(|e| ("embed", e)),
        Command::Serve { data, checkpoint, bind } => {
            let svc = Service::load(ServeConfig { data, checkpoint }).map_err(|e| ("serve", e))?;
            let listener = TcpListener::bind(&bind).map_err(|e| {
                (
                    "serve",
                    graphmatch_core::Error::Io {
                        path: bind.clone(),
                        source: e,
                    },
                )
            })?;
            let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or(bind.clone());
            eprintln!("listening on {addr} checkpoint {}", svc.snapshot().checkpoint);
            service::run(Arc::new(svc), listener).map_err(|e| ("serve", graphmatch_core::Error::Io { path: bind, source: e }))
        }
        Command::Inspect { path } => stages::inspect(&path).and_then(|i| print(&i)).map_err(|e| ("inspect", e)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            let diag = serde_json::json!({ "ok": false, "stage": stage, "error": e.to_string() });
            eprintln!("{diag}");
            ExitCode::from(1)
        }
    }
}
