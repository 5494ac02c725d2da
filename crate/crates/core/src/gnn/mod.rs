//! Edge-aware graph attention encoder, query-guided pooling, fusion network
//! and scoring head.
//!
//! All forward functions record onto a [`Tape`] and are generic over the
//! scalar type, so the same code path serves f32 inference, f32 training and
//! f64 gradient checks.

mod checkpoint;
mod model;

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{
    encode, fuse_and_score, gat_layer_forward, query_guided_pool, score_batch, score_candidates,
    EdgePlan, FusedScore, GatLayerOutput, Mode, PoolOutput,
};

/// Edge features are the type embedding plus one weight column.
pub fn edge_feature_dim(cfg: &ModelConfig) -> usize {
    cfg.edge_type_embed_dim + 1
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub node_in_dim: usize,
    pub query_in_dim: usize,
    pub edge_type_count: usize,
    pub edge_type_embed_dim: usize,
    pub fusion_dims: Vec<usize>,
    pub dropout_p: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Default architecture for `d`-dimensional chunk and query embeddings.
    pub fn new(node_in_dim: usize, query_in_dim: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 256,
            num_heads: 4,
            node_in_dim,
            query_in_dim,
            edge_type_count: 2,
            edge_type_embed_dim: 16,
            fusion_dims: vec![512, 256, 128],
            dropout_p: 0.3,
            leaky_slope: 0.2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Width of the scoring head's hidden layer.
    pub fn head_hidden(&self) -> usize {
        (self.fusion_out() / 4).max(1)
    }

    pub fn fusion_out(&self) -> usize {
        *self.fusion_dims.last().unwrap_or(&1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("hidden_dim and num_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.node_in_dim == 0 || self.query_in_dim == 0 || self.edge_type_embed_dim == 0 {
            return bad("input and edge embedding dimensions must be positive".into());
        }
        if self.edge_type_count < 2 {
            return bad(format!(
                "edge_type_count must be at least 2, got {}",
                self.edge_type_count
            ));
        }
        if self.fusion_dims.is_empty() || self.fusion_dims.contains(&0) {
            return bad(format!(
                "fusion_dims must be nonempty and positive, got {:?}",
                self.fusion_dims
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

/// Layout of every tensor in init order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, heads, hd) = (cfg.hidden_dim, cfg.num_heads, cfg.head_dim());
    let glorot = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };
    let mut out = vec![(
        "edge_type_table".to_string(),
        vec![cfg.edge_type_count, cfg.edge_type_embed_dim],
        Init::Normal(0.02),
    )];
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    for l in 0..cfg.num_layers {
        let d_in = if l == 0 { cfg.node_in_dim } else { h };
        push(format!("gat.{l}.w"), vec![d_in, h], glorot(d_in, h));
        push(
            format!("gat.{l}.w_edge"),
            vec![edge_feature_dim(cfg), h],
            glorot(edge_feature_dim(cfg), h),
        );
        for side in ["att_dst", "att_src", "att_edge"] {
            push(format!("gat.{l}.{side}"), vec![heads, hd], glorot(hd, 1));
        }
        push(format!("gat.{l}.w_out"), vec![h, h], glorot(h, h));
        if d_in != h {
            push(format!("gat.{l}.res"), vec![d_in, h], glorot(d_in, h));
        }
        push(format!("gat.{l}.ln_gamma"), vec![h], Init::Ones);
        push(format!("gat.{l}.ln_beta"), vec![h], Init::Zeros);
    }
    let half = (h / 2).max(1);
    push("pool.node_proj.w".into(), vec![h, h], glorot(h, h));
    push("pool.node_proj.b".into(), vec![h], Init::Zeros);
    push(
        "pool.query_proj.w".into(),
        vec![cfg.query_in_dim, h],
        glorot(cfg.query_in_dim, h),
    );
    push("pool.query_proj.b".into(), vec![h], Init::Zeros);
    push("pool.att1.w".into(), vec![h, half], glorot(h, half));
    push("pool.att1.b".into(), vec![half], Init::Zeros);
    push("pool.att2.w".into(), vec![half, 1], glorot(half, 1));
    push("pool.att2.b".into(), vec![1], Init::Zeros);
    let combined = h + cfg.query_in_dim;
    let mut d_in = combined;
    for (i, &d) in cfg.fusion_dims.iter().enumerate() {
        push(format!("fusion.{i}.w"), vec![d_in, d], glorot(d_in, d));
        push(format!("fusion.{i}.b"), vec![d], Init::Zeros);
        push(format!("fusion.{i}.ln_gamma"), vec![d], Init::Ones);
        push(format!("fusion.{i}.ln_beta"), vec![d], Init::Zeros);
        d_in = d;
    }
    let out_dim = cfg.fusion_out();
    push(
        "fusion.skip.w".into(),
        vec![combined, out_dim],
        glorot(combined, out_dim),
    );
    push("fusion.skip.b".into(), vec![out_dim], Init::Zeros);
    let hh = cfg.head_hidden();
    push("head.0.w".into(), vec![out_dim, hh], glorot(out_dim, hh));
    push("head.0.b".into(), vec![hh], Init::Zeros);
    push("head.1.w".into(), vec![hh, 1], glorot(hh, 1));
    push("head.1.b".into(), vec![1], Init::Zeros);
    out
}

/// Whether `name` belongs to the graph encoder (trained in stage 1, frozen
/// afterwards).
pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("gat.") || name == "edge_type_table"
}

/// Named model tensors plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

/// Glorot-uniform affine weights, zero biases, unit layer-norm scales and a
/// N(0, 0.02) edge-type table, all drawn from one seeded stream in a fixed
/// order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std as f32)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        named.push((name, Tensor::new(shape, data)?));
    }
    ModelParams::from_named(cfg.clone(), named)
}

impl<T: Real> ModelParams<T> {
    /// Builds a parameter set, checking that names and shapes match the
    /// layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors for this config, got {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in specs.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            frozen: vec![false; names.len()],
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Per-tensor freeze flags, in tensor order.
    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn freeze_encoder(&mut self) {
        for (f, name) in self.frozen.iter_mut().zip(&self.names) {
            *f = is_encoder_tensor(name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`. Tensors for which `trainable` is false
    /// become constants.
    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(usize, &str) -> bool,
    ) -> Bound<'_, T> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable(i, &self.names[i])))
            .collect();
        Bound { params: self, vars }
    }

    /// Wraps vars already recorded for these tensors, in tensor order.
    pub fn with_vars(&self, vars: Vec<Var>) -> Result<Bound<'_, T>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vars for {} model tensors",
                vars.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound { params: self, vars })
    }

    /// Binds every tensor as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Bound<'_, T> {
        self.bind(tape, |_, _| false)
    }

    /// Binds unfrozen tensors as trainable.
    pub fn bind_unfrozen(&self, tape: &mut Tape<T>) -> Bound<'_, T> {
        self.bind(tape, |i, _| !self.frozen[i])
    }
}

/// Model tensors recorded on a tape.
#[derive(Debug)]
pub struct Bound<'a, T> {
    params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidData(format!("model has no tensor named {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.index.contains_key(name)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Vars in tensor order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn tiny_config(d: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            node_in_dim: d,
            query_in_dim: d,
            edge_type_count: 2,
            edge_type_embed_dim: 3,
            fusion_dims: vec![12, 8, 8],
            dropout_p: 0.3,
            leaky_slope: 0.2,
        }
    }
}
