use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qgat_core::workflow::{self, QueryInput, RunConfig};

/// Graph-based retrieval with a query-guided graph attention reranker.
#[derive(Debug, Parser)]
#[command(name = "qgat", version)]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// paths.corpus
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// paths.queries
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    /// paths.train_queries
    #[arg(long, global = true)]
    train_queries: Option<PathBuf>,
    /// paths.backbone
    #[arg(long, global = true)]
    backbone: Option<PathBuf>,
    /// paths.checkpoint
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// paths.fusion
    #[arg(long, global = true)]
    fusion: Option<PathBuf>,
    /// paths.out_dir
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// toy_embed: fill missing embeddings with the hashed toy embedder
    #[arg(long, global = true)]
    toy_embed: bool,
    /// embed_dim
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    /// graph.tau
    #[arg(long, global = true)]
    tau: Option<f32>,
    /// graph.k
    #[arg(long, global = true)]
    k: Option<usize>,
    /// retrieval.k_candidates
    #[arg(long, global = true)]
    k_candidates: Option<usize>,
    /// retrieval.alpha
    #[arg(long, global = true)]
    alpha: Option<f32>,
    /// retrieval.top_n
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// retrieval.query_aware
    #[arg(long, global = true)]
    query_aware: bool,
    /// eval_k
    #[arg(long, global = true)]
    eval_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate and normalize the corpus, writing a normalized copy.
    Ingest {
        /// First write a synthetic corpus with N episodes to the configured
        /// corpus and query paths.
        #[arg(long, value_name = "N")]
        make_synthetic: Option<usize>,
    },
    /// Build every episode graph and report edge counts.
    BuildGraph {
        /// Write one edge JSONL file per episode under <out_dir>/graphs.
        #[arg(long)]
        dump: bool,
    },
    /// Train the encoder (stage 1), the scoring path (stage 2) or both.
    Train {
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
        /// train.stage1_epochs
        #[arg(long)]
        stage1_epochs: Option<usize>,
        /// train.stage2_epochs
        #[arg(long)]
        stage2_epochs: Option<usize>,
        /// train.lr
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fit the logistic score fusion on held-out training queries.
    FuseFit,
    /// Print ranked results with every component score as JSONL.
    Retrieve {
        #[arg(long, conflicts_with = "text", required_unless_present = "text")]
        query_id: Option<String>,
        #[arg(long)]
        text: Option<String>,
    },
    /// Evaluate Recall@k against the flat and graph-adjusted baselines.
    Eval,
    /// Train both stages, fit fusion and evaluate.
    Run,
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.paths;
        set(&mut p.corpus, &self.corpus);
        set(&mut p.queries, &self.queries);
        if let Some(t) = &self.train_queries {
            p.train_queries = Some(t.clone());
        }
        set(&mut p.backbone, &self.backbone);
        set(&mut p.checkpoint, &self.checkpoint);
        set(&mut p.fusion, &self.fusion);
        set(&mut p.out_dir, &self.out_dir);
        set(&mut cfg.seed, &self.seed);
        cfg.toy_embed |= self.toy_embed;
        set(&mut cfg.embed_dim, &self.embed_dim);
        set(&mut cfg.graph.tau, &self.tau);
        set(&mut cfg.graph.k, &self.k);
        set(&mut cfg.retrieval.k_candidates, &self.k_candidates);
        set(&mut cfg.retrieval.alpha, &self.alpha);
        set(&mut cfg.retrieval.top_n, &self.top_n);
        cfg.retrieval.query_aware |= self.query_aware;
        set(&mut cfg.eval_k, &self.eval_k);
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    if let Command::Train {
        stage1_epochs,
        stage2_epochs,
        lr,
        ..
    } = &cli.command
    {
        set(&mut cfg.train.stage1_epochs, stage1_epochs);
        set(&mut cfg.train.stage2_epochs, stage2_epochs);
        set(&mut cfg.train.lr, lr);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest { make_synthetic } => {
            if let Some(n) = make_synthetic {
                let syn = workflow::make_synthetic(&cfg, *n)?;
                println!(
                    "synthetic: {} episodes, {} eval queries, {} train queries -> {}",
                    syn.episodes,
                    syn.eval_queries,
                    syn.train_queries,
                    cfg.paths.corpus.display()
                );
            }
            let s = workflow::ingest(&cfg)?;
            println!(
                "ingested {} chunks in {} episodes (dim {}), {} queries, {} training queries",
                s.chunks, s.episodes, s.dim, s.queries, s.train_queries
            );
        }
        Command::BuildGraph { dump } => {
            let s = workflow::build_graphs(&cfg, *dump)?;
            println!(
                "{} graphs, {} nodes, {} sequential and {} semantic edges",
                s.episodes, s.nodes, s.sequential_edges, s.semantic_edges
            );
        }
        Command::Train { stage, .. } => {
            let p = workflow::prepare(&cfg)?;
            if matches!(stage, Stage::One | Stage::All) {
                let (_, log) = workflow::run_stage1(&cfg, &p)?;
                print_log(&log);
                println!("backbone -> {}", cfg.paths.backbone.display());
            }
            if matches!(stage, Stage::Two | Stage::All) {
                let (_, log) = workflow::run_stage2(&cfg, &p)?;
                print_log(&log);
                println!("model -> {}", cfg.paths.checkpoint.display());
            }
        }
        Command::FuseFit => {
            let p = workflow::prepare(&cfg)?;
            let m = workflow::run_fuse_fit(&cfg, &p)?;
            println!(
                "fusion beta0 {:.4}, beta [idx {:.4}, graph {:.4}, gnn {:.4}] -> {}",
                m.beta0,
                m.beta[0],
                m.beta[1],
                m.beta[2],
                cfg.paths.fusion.display()
            );
        }
        Command::Retrieve { query_id, text } => {
            let input = match (query_id, text) {
                (Some(id), _) => QueryInput::Id(id.clone()),
                (None, Some(t)) => QueryInput::Text(t.clone()),
                (None, None) => unreachable!("clap requires one of --query-id and --text"),
            };
            let p = workflow::prepare(&cfg)?;
            for (rank, r) in workflow::run_retrieve(&cfg, &p, &input)?.iter().enumerate() {
                let mut line = serde_json::to_value(r)?;
                line["rank"] = (rank + 1).into();
                println!("{line}");
            }
        }
        Command::Eval => {
            let p = workflow::prepare(&cfg)?;
            print!("{}", workflow::run_eval(&cfg, &p)?.to_text());
        }
        Command::Run => print!("{}", workflow::run_all(&cfg)?.to_text()),
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn print_log(log: &[qgat_core::training::EpochRecord]) {
    for r in log {
        println!("stage {} epoch {:>3} loss {:.6}", r.stage, r.epoch, r.loss);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let name = e
                .chain()
                .find_map(|c| c.downcast_ref::<qgat_core::Error>())
                .map_or("Error", qgat_core::Error::name);
            let detail = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {name}: {detail}");
            ExitCode::from(1)
        }
    }
}
