//! Run configuration and the file-level steps of a full run: ingest, graph
//! building, both training stages, fusion fitting, retrieval and
//! evaluation. The command-line driver is a thin layer over these.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    fill_query_embeddings, label_chunk_relevance, load_corpus, load_queries, save_corpus,
    write_jsonl, ChunkRef, Corpus, Query,
};
use crate::embed::{normalize, toy_embed};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Method};
use crate::gnn::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::graph::{
    build_corpus_graphs, EdgeKind, EpisodeGraphs, GraphCache, DEFAULT_TAU, DEFAULT_TOP_K,
};
use crate::retrieval::{
    fusion_fit, graph_adjusted_candidates, retrieve, FlatIndex, FusionModel, RetrievalResult,
    RetrieveOptions,
};
use crate::synthetic::{generate, SyntheticConfig};
use crate::training::{train_stage1, train_stage2, EpochRecord, TrainConfig};

pub const BASELINE_METHOD: &str = "Flat cosine";
pub const ADJUSTED_METHOD: &str = "Graph-adjusted";
pub const PIPELINE_METHOD: &str = "Query-guided GAT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    /// Queries used for stage-2 training and fusion fitting. When absent the
    /// evaluation queries are used.
    pub train_queries: Option<PathBuf>,
    /// Stage-1 output.
    pub backbone: PathBuf,
    /// Stage-2 output, the model used for retrieval.
    pub checkpoint: PathBuf,
    pub fusion: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus.jsonl".into(),
            queries: "run/queries.jsonl".into(),
            train_queries: Some("run/train_queries.jsonl".into()),
            backbone: "run/stage1.qgat".into(),
            checkpoint: "run/model.qgat".into(),
            fusion: "run/fusion.json".into(),
            out_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub tau: f32,
    pub k: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            k: DEFAULT_TOP_K,
        }
    }
}

/// Architecture settings; input widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub edge_type_embed_dim: usize,
    pub fusion_dims: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            edge_type_embed_dim: m.edge_type_embed_dim,
            fusion_dims: m.fusion_dims,
            leaky_slope: m.leaky_slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub graph: GraphParams,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub retrieval: RetrieveOptions,
    pub seed: u64,
    /// Embed chunk and query texts that lack embeddings with the toy embedder.
    pub toy_embed: bool,
    pub embed_dim: usize,
    pub eval_k: usize,
    /// Fraction of the training queries held out of stage 2 and used only to
    /// fit score fusion. With 0 both steps see every training query.
    pub fusion_holdout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            graph: GraphParams::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            retrieval: RetrieveOptions::default(),
            seed: 0,
            toy_embed: false,
            embed_dim: 32,
            eval_k: 5,
            fusion_holdout: 0.25,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.graph.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [0, 1), got {}",
                self.graph.tau
            )));
        }
        if self.eval_k == 0 || self.retrieval.k_candidates == 0 || self.retrieval.top_n == 0 {
            return Err(Error::InvalidConfig(
                "eval_k, k_candidates and top_n must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.retrieval.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.retrieval.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.fusion_holdout) {
            return Err(Error::InvalidConfig(format!(
                "fusion_holdout must lie in [0, 1), got {}",
                self.fusion_holdout
            )));
        }
        if self.toy_embed && self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be at least 2".into()));
        }
        self.train.validate()?;
        self.model_config(self.embed_dim.max(1)).validate()
    }

    /// The seed used by training; the run seed wins over the train section.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            node_in_dim: dim,
            query_in_dim: dim,
            edge_type_embed_dim: m.edge_type_embed_dim,
            fusion_dims: m.fusion_dims.clone(),
            dropout_p: self.train.dropout,
            leaky_slope: m.leaky_slope,
            ..ModelConfig::new(dim, dim)
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }
}

/// Embedded, normalized corpus and queries.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub train_queries: Vec<Query>,
}

fn prepare_queries(cfg: &RunConfig, mut queries: Vec<Query>) -> Result<Vec<Query>> {
    if cfg.toy_embed {
        fill_query_embeddings(&mut queries, cfg.embed_dim, cfg.seed)?;
    }
    for q in &mut queries {
        if let Some(e) = &q.embedding {
            q.embedding = Some(normalize(e)?);
        }
    }
    Ok(queries)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut corpus = load_corpus(&cfg.paths.corpus)?;
    if cfg.toy_embed {
        corpus.fill_toy_embeddings(cfg.embed_dim, cfg.seed)?;
    }
    corpus.normalize_embeddings()?;
    if corpus.chunks().any(|c| c.embedding.is_none()) {
        let c = corpus
            .chunks()
            .find(|c| c.embedding.is_none())
            .map(|c| c.chunk_id.clone());
        return Err(Error::MissingEmbedding(c.unwrap_or_default()));
    }
    let queries = prepare_queries(cfg, load_queries(&cfg.paths.queries)?)?;
    let train_queries = match &cfg.paths.train_queries {
        Some(p) if p.exists() => prepare_queries(cfg, load_queries(p)?)?,
        _ => queries.clone(),
    };
    Ok(Dataset {
        corpus,
        queries,
        train_queries,
    })
}

impl Dataset {
    /// Splits the training queries into the stage-2 part and the fusion part.
    /// The last `ceil(holdout * n)` queries form the fusion part.
    pub fn split_train(&self, holdout: f64) -> (&[Query], &[Query]) {
        let n = self.train_queries.len();
        if holdout <= 0.0 || n < 2 {
            return (&self.train_queries, &self.train_queries);
        }
        let held = ((holdout * n as f64).ceil() as usize).clamp(1, n - 1);
        self.train_queries.split_at(n - held)
    }
}

/// Index and graphs over a dataset.
pub struct Prepared {
    pub data: Dataset,
    pub index: FlatIndex,
    pub graphs: EpisodeGraphs,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = load_dataset(cfg)?;
    let index = FlatIndex::build(&data.corpus)?;
    let graphs = build_corpus_graphs(&data.corpus, cfg.graph.tau, cfg.graph.k, &GraphCache::new())?;
    Ok(Prepared {
        data,
        index,
        graphs,
    })
}

/// Writes a synthetic corpus with `episodes` episodes (two evaluation and
/// 1.2 training queries per episode) to the configured corpus and query
/// paths.
pub fn make_synthetic(cfg: &RunConfig, episodes: usize) -> Result<SyntheticConfig> {
    let syn = SyntheticConfig {
        episodes,
        eval_queries: 2 * episodes,
        train_queries: episodes * 6 / 5,
        seed: cfg.seed,
        ..SyntheticConfig::default()
    };
    let data = generate(&syn)?;
    for p in [
        Some(&cfg.paths.corpus),
        Some(&cfg.paths.queries),
        cfg.paths.train_queries.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    write_jsonl(&cfg.paths.corpus, &data.chunks)?;
    write_jsonl(&cfg.paths.queries, &data.eval_queries)?;
    if let Some(p) = &cfg.paths.train_queries {
        write_jsonl(p, &data.train_queries)?;
    }
    Ok(syn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub episodes: usize,
    pub chunks: usize,
    pub dim: usize,
    pub queries: usize,
    pub train_queries: usize,
}

/// Validates the inputs and writes the embedded, normalized corpus copy.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let data = load_dataset(cfg)?;
    fs::create_dir_all(&cfg.paths.out_dir)?;
    save_corpus(&cfg.out("corpus.normalized.jsonl"), &data.corpus)?;
    let summary = IngestSummary {
        episodes: data.corpus.episodes.len(),
        chunks: data.corpus.len(),
        dim: data.corpus.dim().unwrap_or(0),
        queries: data.queries.len(),
        train_queries: data.train_queries.len(),
    };
    fs::write(
        cfg.out("ingest_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub episodes: usize,
    pub nodes: usize,
    pub sequential_edges: usize,
    pub semantic_edges: usize,
}

/// Builds every episode graph; with `dump` also writes one edge file per
/// episode under `<out_dir>/graphs`.
pub fn build_graphs(cfg: &RunConfig, dump: bool) -> Result<GraphSummary> {
    let p = prepare(cfg)?;
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let count = |kind| {
        p.graphs
            .iter()
            .map(|g| g.edges().iter().filter(|e| e.kind == kind).count())
            .sum()
    };
    let summary = GraphSummary {
        episodes: p.graphs.len(),
        nodes: p.graphs.iter().map(|g| g.node_count()).sum(),
        sequential_edges: count(EdgeKind::Sequential),
        semantic_edges: count(EdgeKind::Semantic),
    };
    if dump {
        let dir = cfg.out("graphs");
        fs::create_dir_all(&dir)?;
        for g in p.graphs.iter() {
            g.write_edge_dump(&dir.join(format!("{}.jsonl", g.episode_id())))?;
        }
    }
    fs::write(
        cfg.out("graph_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

fn corpus_dim(p: &Prepared) -> Result<usize> {
    p.data.corpus.dim().ok_or(Error::EmptyIndex)
}

/// Stage 1 on every episode graph; writes the backbone checkpoint and its
/// training log.
pub fn run_stage1(cfg: &RunConfig, p: &Prepared) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let params = init_params(&cfg.model_config(corpus_dim(p)?), cfg.seed)?;
    let out = train_stage1(&p.graphs, params, &cfg.train_config())?;
    fs::create_dir_all(&cfg.paths.out_dir)?;
    save_checkpoint(&out.params, &cfg.paths.backbone)?;
    write_jsonl(&cfg.out("train_log_stage1.jsonl"), &out.log)?;
    Ok((out.params, out.log))
}

pub fn load_backbone(cfg: &RunConfig) -> Result<ModelParams> {
    if !cfg.paths.backbone.exists() {
        return Err(Error::MissingBackbone(
            cfg.paths.backbone.display().to_string(),
        ));
    }
    let mut params = load_checkpoint(&cfg.paths.backbone)?;
    params.freeze_encoder();
    Ok(params)
}

/// Stage 2 from the saved backbone; writes the final checkpoint and log.
pub fn run_stage2(cfg: &RunConfig, p: &Prepared) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let backbone = load_backbone(cfg)?;
    let dim = corpus_dim(p)?;
    if backbone.config().node_in_dim != dim {
        return Err(Error::DimensionMismatch {
            expected: backbone.config().node_in_dim,
            got: dim,
        });
    }
    let (queries, _) = p.data.split_train(cfg.fusion_holdout);
    let out = train_stage2(
        &p.data.corpus,
        queries,
        &p.index,
        &p.graphs,
        backbone,
        &cfg.train_config(),
    )?;
    fs::create_dir_all(&cfg.paths.out_dir)?;
    save_checkpoint(&out.params, &cfg.paths.checkpoint)?;
    write_jsonl(&cfg.out("train_log_stage2.jsonl"), &out.log)?;
    Ok((out.params, out.log))
}

pub fn load_model(cfg: &RunConfig) -> Result<ModelParams> {
    if !cfg.paths.checkpoint.exists() {
        return Err(Error::ModelNotLoaded);
    }
    load_checkpoint(&cfg.paths.checkpoint)
}

/// Fusion feature rows of the candidates of every held-out training query,
/// labeled by relevance.
pub fn fusion_rows(
    cfg: &RunConfig,
    p: &Prepared,
    params: &ModelParams,
) -> Result<Vec<([f32; 3], bool)>> {
    let opts = RetrieveOptions {
        top_n: cfg.retrieval.k_candidates,
        ..cfg.retrieval.clone()
    };
    let threshold = cfg.train.overlap_threshold;
    let (_, queries) = p.data.split_train(cfg.fusion_holdout);
    let per_query = queries
        .par_iter()
        .filter(|q| q.has_ground_truth())
        .map(|q| -> Result<Vec<([f32; 3], bool)>> {
            let results = retrieve(
                q.embedding()?,
                &p.data.corpus,
                &p.index,
                &p.graphs,
                Some(params),
                None,
                &opts,
            )?;
            Ok(results
                .iter()
                .map(|r| {
                    let label = label_chunk_relevance(p.data.corpus.chunk(r.chunk), q, threshold);
                    ([r.idx_score, r.graph_score, r.gnn_score], label)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

pub fn run_fuse_fit(cfg: &RunConfig, p: &Prepared) -> Result<FusionModel> {
    let params = load_model(cfg)?;
    let model = fusion_fit(&fusion_rows(cfg, p, &params)?)?;
    if let Some(dir) = cfg
        .paths
        .fusion
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
    {
        fs::create_dir_all(dir)?;
    }
    model.save(&cfg.paths.fusion)?;
    Ok(model)
}

pub fn load_fusion(cfg: &RunConfig) -> Result<Option<FusionModel>> {
    if cfg.paths.fusion.exists() {
        FusionModel::load(&cfg.paths.fusion).map(Some)
    } else {
        Ok(None)
    }
}

/// A retrieval request: a known query id or free text (toy-embedded).
#[derive(Debug, Clone)]
pub enum QueryInput {
    Id(String),
    Text(String),
}

pub fn query_embedding(cfg: &RunConfig, p: &Prepared, input: &QueryInput) -> Result<Vec<f32>> {
    match input {
        QueryInput::Id(id) => p
            .data
            .queries
            .iter()
            .chain(&p.data.train_queries)
            .find(|q| &q.query_id == id)
            .ok_or_else(|| Error::InvalidData(format!("unknown query id {id:?}")))?
            .embedding()
            .map(<[f32]>::to_vec),
        QueryInput::Text(text) => {
            if !cfg.toy_embed {
                return Err(Error::InvalidConfig(
                    "free-text queries need the toy embedder".into(),
                ));
            }
            toy_embed(text, cfg.embed_dim, cfg.seed)
        }
    }
}

pub fn run_retrieve(
    cfg: &RunConfig,
    p: &Prepared,
    input: &QueryInput,
) -> Result<Vec<RetrievalResult>> {
    let params = load_model(cfg)?;
    let fusion = load_fusion(cfg)?;
    let emb = query_embedding(cfg, p, input)?;
    retrieve(
        &emb,
        &p.data.corpus,
        &p.index,
        &p.graphs,
        Some(&params),
        fusion.as_ref(),
        &cfg.retrieval,
    )
}

/// Flat-cosine baseline, graph-adjusted ranking and the full pipeline over
/// the evaluation queries; writes `eval_report.{json,txt}`.
pub fn run_eval(cfg: &RunConfig, p: &Prepared) -> Result<EvalReport> {
    let params = load_model(cfg)?;
    let fusion = load_fusion(cfg)?;
    let k = cfg.eval_k;
    let opts = RetrieveOptions {
        top_n: k.max(cfg.retrieval.top_n),
        ..cfg.retrieval.clone()
    };
    let refs = |r: Vec<RetrievalResult>| r.into_iter().map(|r| r.chunk).collect::<Vec<ChunkRef>>();
    let methods: Vec<Method> = vec![
        (
            BASELINE_METHOD.into(),
            Box::new(|q: &Query| {
                Ok(p.index
                    .search(q.embedding()?, k)?
                    .into_iter()
                    .map(|h| h.chunk)
                    .collect())
            }),
        ),
        (
            ADJUSTED_METHOD.into(),
            Box::new(|q: &Query| {
                Ok(refs(graph_adjusted_candidates(
                    q.embedding()?,
                    &p.data.corpus,
                    &p.index,
                    &p.graphs,
                    &opts,
                )?))
            }),
        ),
        (
            PIPELINE_METHOD.into(),
            Box::new(|q: &Query| {
                Ok(refs(retrieve(
                    q.embedding()?,
                    &p.data.corpus,
                    &p.index,
                    &p.graphs,
                    Some(&params),
                    fusion.as_ref(),
                    &opts,
                )?))
            }),
        ),
    ];
    let queries: Vec<Query> = p
        .data
        .queries
        .iter()
        .filter(|q| q.has_ground_truth())
        .cloned()
        .collect();
    let report = evaluate(
        &p.data.corpus,
        &queries,
        &methods,
        k,
        cfg.train.overlap_threshold,
    )?;
    report.write(&cfg.paths.out_dir, "eval_report")?;
    Ok(report)
}

/// Build graphs, train both stages, fit fusion and evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    run_stage1(cfg, &p)?;
    run_stage2(cfg, &p)?;
    run_fuse_fit(cfg, &p)?;
    run_eval(cfg, &p)
}
