use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{to_batched_graph, BatchedGraph, EpisodeGraph};

use super::{Bound, ModelParams, LAYER_NORM_EPS};

/// Training flag plus the seed that drives every dropout mask of a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }

    /// Independent seed for one dropout site.
    fn site(&self, tag: u64) -> u64 {
        let mut z = self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// Edges of a batched graph reordered by destination, the layout the
/// segment ops need.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePlan {
    pub num_nodes: usize,
    /// `order[k]` is the batched-graph edge stored at sorted position `k`.
    pub order: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub type_id: Vec<usize>,
    pub weight: Vec<f32>,
}

impl EdgePlan {
    pub fn new(bg: &BatchedGraph) -> Self {
        let mut order: Vec<usize> = (0..bg.num_edges()).collect();
        order.sort_by_key(|&e| bg.edge_dst[e]);
        Self {
            num_nodes: bg.num_nodes(),
            src: order.iter().map(|&e| bg.edge_src[e]).collect(),
            dst: order.iter().map(|&e| bg.edge_dst[e]).collect(),
            type_id: order.iter().map(|&e| bg.edge_type_id[e]).collect(),
            weight: order.iter().map(|&e| bg.edge_weight[e]).collect(),
            order,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatLayerOutput {
    pub h: Var,
    /// Attention `[E x heads]` in [`EdgePlan`] order, before dropout. `None`
    /// when the graph has no edges.
    pub attention: Option<Var>,
}

fn affine<T: Real>(tape: &mut Tape<T>, p: &Bound<T>, x: Var, prefix: &str) -> Result<Var> {
    let xw = tape.matmul(x, p.var(&format!("{prefix}.w"))?)?;
    tape.add(xw, p.var(&format!("{prefix}.b"))?)
}

/// One edge-aware attention layer.
///
/// Per head, the logit of edge `j -> i` is
/// `leaky_relu(a_dst . W h_i + a_src . W h_j + a_edge . W_e e_ij)` with
/// `e_ij = [type_embedding, weight]`, normalized over the incoming edges of
/// `i`. Head messages are concatenated, projected by `W_o`, added to the
/// (projected) residual, then passed through ReLU and layer norm. Nodes
/// without incoming edges receive a zero message.
pub fn gat_layer_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    layer: usize,
    h: Var,
    plan: &EdgePlan,
    mode: Mode,
) -> Result<GatLayerOutput> {
    let cfg = p.config().clone();
    let (n, _) = tape.value(h).dims2()?;
    if n != plan.num_nodes {
        return Err(Error::ShapeMismatch(format!(
            "layer input has {n} rows for {} nodes",
            plan.num_nodes
        )));
    }
    let name = |s: &str| format!("gat.{layer}.{s}");
    let z = tape.matmul(h, p.var(&name("w"))?)?;

    let (message, attention) = if plan.num_edges() == 0 {
        (tape.constant(Tensor::zeros(&[n, cfg.hidden_dim])), None)
    } else {
        let e = plan.num_edges();
        let types = tape.embedding_lookup(p.var("edge_type_table")?, &plan.type_id)?;
        let w_col = Tensor::matrix(
            e,
            1,
            plan.weight.iter().map(|&w| T::lit(f64::from(w))).collect(),
        )?;
        let w_col = tape.constant(w_col);
        let feats = tape.concat(types, w_col)?;
        let ze = tape.matmul(feats, p.var(&name("w_edge"))?)?;

        let s_dst = tape.head_dot(z, p.var(&name("att_dst"))?)?;
        let s_src = tape.head_dot(z, p.var(&name("att_src"))?)?;
        let s_edge = tape.head_dot(ze, p.var(&name("att_edge"))?)?;
        let s_dst = tape.embedding_lookup(s_dst, &plan.dst)?;
        let s_src = tape.embedding_lookup(s_src, &plan.src)?;
        let logits = tape.add(s_dst, s_src)?;
        let logits = tape.add(logits, s_edge)?;
        let logits = tape.leaky_relu(logits, cfg.leaky_slope);
        let alpha = tape.segment_softmax(logits, &plan.dst, n)?;
        let alpha_d = tape.dropout(
            alpha,
            cfg.dropout_p,
            mode.training,
            mode.site(2 * layer as u64),
        )?;

        let z_src = tape.embedding_lookup(z, &plan.src)?;
        let weighted = tape.head_scale(alpha_d, z_src)?;
        (tape.segment_sum(weighted, &plan.dst, n)?, Some(alpha))
    };

    let out = tape.matmul(message, p.var(&name("w_out"))?)?;
    let residual = if p.has(&name("res")) {
        tape.matmul(h, p.var(&name("res"))?)?
    } else {
        h
    };
    let out = tape.add(out, residual)?;
    let out = tape.relu(out);
    let out = tape.layer_norm(
        out,
        p.var(&name("ln_gamma"))?,
        p.var(&name("ln_beta"))?,
        LAYER_NORM_EPS,
    )?;
    Ok(GatLayerOutput { h: out, attention })
}

/// Node features of `bg` as a tape constant.
fn node_input<T: Real>(tape: &mut Tape<T>, bg: &BatchedGraph, expected_dim: usize) -> Result<Var> {
    if bg.feature_dim != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            got: bg.feature_dim,
        });
    }
    let data = bg
        .node_features
        .iter()
        .map(|&x| T::lit(f64::from(x)))
        .collect();
    Ok(tape.constant(Tensor::matrix(bg.num_nodes(), bg.feature_dim, data)?))
}

/// Runs every attention layer over a batched graph: `[N x hidden_dim]`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    bg: &BatchedGraph,
    mode: Mode,
) -> Result<Var> {
    let mut h = node_input(tape, bg, p.config().node_in_dim)?;
    let plan = EdgePlan::new(bg);
    for layer in 0..p.config().num_layers {
        h = gat_layer_forward(tape, p, layer, h, &plan, mode)?.h;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolOutput {
    /// Graph representations `[B x hidden_dim]`.
    pub g: Var,
    /// Per-node pooling weights `[N x 1]`, before dropout on `g`.
    pub weights: Var,
}

/// Query-conditioned attention pooling. `queries` holds one row per graph;
/// `batch[i]` is the graph of node row `i`.
pub fn query_guided_pool<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    h: Var,
    queries: Var,
    batch: &[usize],
    num_graphs: usize,
    mode: Mode,
) -> Result<PoolOutput> {
    let (qrows, _) = tape.value(queries).dims2()?;
    if qrows != num_graphs {
        return Err(Error::ShapeMismatch(format!(
            "{qrows} query rows for {num_graphs} graphs"
        )));
    }
    let hn = affine(tape, p, h, "pool.node_proj")?;
    let hq = affine(tape, p, queries, "pool.query_proj")?;
    let hq = tape.embedding_lookup(hq, batch)?;
    let joint = tape.add(hn, hq)?;
    let s = affine(tape, p, joint, "pool.att1")?;
    let s = tape.relu(s);
    let s = affine(tape, p, s, "pool.att2")?;
    let weights = tape.segment_softmax(s, batch, num_graphs)?;
    let weighted = tape.head_scale(weights, h)?;
    let g = tape.segment_sum(weighted, batch, num_graphs)?;
    let g = tape.dropout(g, p.config().dropout_p, mode.training, mode.site(u64::MAX))?;
    Ok(PoolOutput { g, weights })
}

#[derive(Debug, Clone, Copy)]
pub struct FusedScore {
    /// Pre-sigmoid scores `[B x 1]`.
    pub logit: Var,
    pub score: Var,
}

/// Fusion network over `[g, q]` with a learned skip projection, followed by
/// the two-layer scoring head.
pub fn fuse_and_score<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound<T>,
    g: Var,
    queries: Var,
    _mode: Mode,
) -> Result<FusedScore> {
    let combined = tape.concat(g, queries)?;
    let layers = p.config().fusion_dims.len();
    let mut f = combined;
    for i in 0..layers {
        f = affine(tape, p, f, &format!("fusion.{i}"))?;
        if i + 1 < layers {
            f = tape.relu(f);
        }
        let (gamma, beta) = (
            p.var(&format!("fusion.{i}.ln_gamma"))?,
            p.var(&format!("fusion.{i}.ln_beta"))?,
        );
        f = tape.layer_norm(f, gamma, beta, LAYER_NORM_EPS)?;
    }
    let skip = affine(tape, p, combined, "fusion.skip")?;
    let f = tape.add(f, skip)?;
    let s = affine(tape, p, f, "head.0")?;
    let s = tape.relu(s);
    let logit = affine(tape, p, s, "head.1")?;
    let score = tape.sigmoid(logit);
    Ok(FusedScore { logit, score })
}

/// Eval-mode scores of every graph in `bg` against its query row.
pub fn score_batch<T: Real>(
    params: &ModelParams<T>,
    bg: &BatchedGraph,
    queries: &Tensor<T>,
) -> Result<Vec<T>> {
    let cfg = params.config();
    let (rows, dq) = queries.dims2()?;
    if dq != cfg.query_in_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.query_in_dim,
            got: dq,
        });
    }
    if rows != bg.num_graphs {
        return Err(Error::ShapeMismatch(format!(
            "{rows} query rows for {} graphs",
            bg.num_graphs
        )));
    }
    let mut tape = Tape::new();
    let p = params.bind_constants(&mut tape);
    let mode = Mode::eval();
    let h = encode(&mut tape, &p, bg, mode)?;
    let q = tape.constant(queries.clone());
    let pooled = query_guided_pool(&mut tape, &p, h, q, &bg.batch, bg.num_graphs, mode)?;
    let fused = fuse_and_score(&mut tape, &p, pooled.g, q, mode)?;
    Ok(tape.value(fused.score).data().to_vec())
}

/// Scores candidate subgraphs against one query. Subgraphs without edges
/// score 0.0; the output is aligned with `subgraphs`.
pub fn score_candidates<T: Real>(
    params: &ModelParams<T>,
    query_emb: &[f32],
    subgraphs: &[&EpisodeGraph],
) -> Result<Vec<T>> {
    let cfg = params.config();
    if query_emb.len() != cfg.query_in_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.query_in_dim,
            got: query_emb.len(),
        });
    }
    let mut out = vec![T::zero(); subgraphs.len()];
    if subgraphs.iter().all(|g| g.edge_count() == 0) {
        return Ok(out);
    }
    let bg = to_batched_graph(subgraphs)?;
    let row: Vec<T> = query_emb.iter().map(|&x| T::lit(f64::from(x))).collect();
    let queries = Tensor::matrix(bg.num_graphs, row.len(), row.repeat(bg.num_graphs))?;
    let scores = score_batch(params, &bg, &queries)?;
    for (b, s) in scores.into_iter().enumerate() {
        out[bg.sources[b]] = s;
    }
    Ok(out)
}
