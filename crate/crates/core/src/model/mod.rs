//! The two-encoder attention network.
//!
//! A heterogeneous encoder aggregates projected node features, a query
//! encoder propagates a one-hot query indicator, and a per-layer fusion
//! module blends the two views. Both encoders share one edge-semantic
//! attention mechanism that scores each edge from its endpoints plus an edge
//! feature vector (dataset-provided, or a learned per-edge-type embedding).

mod forward;

pub use forward::{
    collect_gradients, edge_attention_values, encoder_layer_values, forward, fuse_values, predict,
    project_features, query_indicator, AttentionRecord, DropoutMode, EncoderKind, ForwardResult,
    ParamVars, PreparedGraph, LEAKY_SLOPE,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{glorot_uniform, Tensor};
use crate::graph::TypeRegistry;
use crate::seeds::{self, TAG_INIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder depth L.
    pub layers: usize,
    /// Width d of every encoder layer output; must be divisible by `heads`.
    pub hidden_dim: usize,
    /// Attention heads K per layer.
    pub heads: usize,
    /// Width of the unified feature space the per-type projections map into.
    pub unified_dim: usize,
    /// Width of edge feature vectors / edge-type embeddings.
    pub edge_dim: usize,
    /// Dropout rate applied to each encoder layer's input during training.
    pub dropout: f64,
    /// Hidden width of the scoring MLP.
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 8,
            unified_dim: 64,
            edge_dim: 16,
            dropout: 0.5,
            mlp_hidden: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("checkpoint: unsupported version {0}")]
    Version(u32),
    #[error("checkpoint: missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(
        "dataset edge features are {actual} wide but the model's edge_dim is {expected}; \
         they must match"
    )]
    EdgeDimMismatch { expected: usize, actual: usize },
    #[error("graph has node type `{0}` with no projection parameter")]
    MissingProjection(String),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers < 1 {
            return Err(ModelError::BadConfig("layers must be >= 1".into()));
        }
        if self.heads < 1 {
            return Err(ModelError::BadConfig("heads must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.unified_dim == 0 || self.edge_dim == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::BadConfig(
                "unified_dim, edge_dim and mlp_hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Input width of encoder layer `l` (0-based).
    fn layer_input_dim(&self, encoder: EncoderKind, l: usize) -> usize {
        if l == 0 {
            match encoder {
                EncoderKind::Hetero => self.unified_dim,
                EncoderKind::Query => 1,
            }
        } else {
            self.hidden_dim
        }
    }
}

/// One attention head: node transform, edge-feature transform, and the
/// attention vector over `[W h_dst || W h_src || W_e e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub edge_weight: Tensor,
    pub attn: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub residual: Tensor,
}

/// Per-layer fusion vectors scoring the two views of each node.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub hetero_vec: Tensor,
    pub query_vec: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Per node type: `(d_t, unified_dim)` projection.
    pub proj: Vec<Tensor>,
    /// Per edge type (reverse companions included): one `edge_dim` row.
    pub edge_embed: Tensor,
    pub hetero: Vec<LayerParams>,
    pub query: Vec<LayerParams>,
    pub fusion: Vec<FusionParams>,
    pub mlp: MlpParams,
}

fn layer_params<F: FnMut(usize, usize) -> Tensor>(
    config: &ModelConfig,
    encoder: EncoderKind,
    l: usize,
    make: &mut F,
) -> LayerParams {
    let d_in = config.layer_input_dim(encoder, l);
    let h = config.head_dim();
    let heads = (0..config.heads)
        .map(|_| HeadParams {
            weight: make(d_in, h),
            edge_weight: make(config.edge_dim, h),
            attn: make(3 * h, 1),
        })
        .collect();
    LayerParams {
        heads,
        residual: make(d_in, config.hidden_dim),
    }
}

impl ModelParams {
    /// Fresh parameters: uniform Glorot for all matrices and attention
    /// vectors, zero biases. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, registry: &TypeRegistry, seed: u64) -> ModelParams {
        let mut rng = seeds::rng_for(seed, &[TAG_INIT]);
        let mut make = |r: usize, c: usize| glorot_uniform(&mut rng, r, c);
        let proj = registry
            .node_types
            .iter()
            .map(|t| make(t.feature_dim, config.unified_dim))
            .collect();
        let edge_embed = make(registry.edge_types.len(), config.edge_dim);
        let hetero = (0..config.layers)
            .map(|l| layer_params(config, EncoderKind::Hetero, l, &mut make))
            .collect();
        let query = (0..config.layers)
            .map(|l| layer_params(config, EncoderKind::Query, l, &mut make))
            .collect();
        let fusion = (0..config.layers)
            .map(|_| FusionParams {
                hetero_vec: make(config.hidden_dim, 1),
                query_vec: make(config.hidden_dim, 1),
            })
            .collect();
        let mlp = MlpParams {
            w1: make(config.hidden_dim, config.mlp_hidden),
            b1: Tensor::zeros(1, config.mlp_hidden),
            w2: make(config.mlp_hidden, 1),
            b2: Tensor::zeros(1, 1),
        };
        ModelParams {
            proj,
            edge_embed,
            hetero,
            query,
            fusion,
            mlp,
        }
    }

    /// Zero-valued parameters with the shapes implied by config + registry.
    pub fn zeros(config: &ModelConfig, registry: &TypeRegistry) -> ModelParams {
        let mut make = |r: usize, c: usize| Tensor::zeros(r, c);
        ModelParams {
            proj: registry
                .node_types
                .iter()
                .map(|t| make(t.feature_dim, config.unified_dim))
                .collect(),
            edge_embed: make(registry.edge_types.len(), config.edge_dim),
            hetero: (0..config.layers)
                .map(|l| layer_params(config, EncoderKind::Hetero, l, &mut make))
                .collect(),
            query: (0..config.layers)
                .map(|l| layer_params(config, EncoderKind::Query, l, &mut make))
                .collect(),
            fusion: (0..config.layers)
                .map(|_| FusionParams {
                    hetero_vec: make(config.hidden_dim, 1),
                    query_vec: make(config.hidden_dim, 1),
                })
                .collect(),
            mlp: MlpParams {
                w1: make(config.hidden_dim, config.mlp_hidden),
                b1: make(1, config.mlp_hidden),
                w2: make(config.mlp_hidden, 1),
                b2: make(1, 1),
            },
        }
    }

    /// Visits every tensor with its canonical name, in a fixed order. The
    /// checkpoint format, gradient collection, and the optimizer all rely on
    /// this order; keep it in sync with `for_each_mut` and
    /// `ParamVars::upload`.
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.proj.iter().enumerate() {
            f(format!("proj.{i}"), t);
        }
        f("edge_embed".to_string(), &self.edge_embed);
        for (enc_name, layers) in [("hetero", &self.hetero), ("query", &self.query)] {
            for (l, layer) in layers.iter().enumerate() {
                for (k, head) in layer.heads.iter().enumerate() {
                    f(format!("{enc_name}.{l}.head.{k}.weight"), &head.weight);
                    f(
                        format!("{enc_name}.{l}.head.{k}.edge_weight"),
                        &head.edge_weight,
                    );
                    f(format!("{enc_name}.{l}.head.{k}.attn"), &head.attn);
                }
                f(format!("{enc_name}.{l}.residual"), &layer.residual);
            }
        }
        for (l, fp) in self.fusion.iter().enumerate() {
            f(format!("fusion.{l}.hetero_vec"), &fp.hetero_vec);
            f(format!("fusion.{l}.query_vec"), &fp.query_vec);
        }
        f("mlp.w1".to_string(), &self.mlp.w1);
        f("mlp.b1".to_string(), &self.mlp.b1);
        f("mlp.w2".to_string(), &self.mlp.w2);
        f("mlp.b2".to_string(), &self.mlp.b2);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.proj.iter_mut().enumerate() {
            f(format!("proj.{i}"), t);
        }
        f("edge_embed".to_string(), &mut self.edge_embed);
        for (enc_name, layers) in [
            ("hetero", &mut self.hetero),
            ("query", &mut self.query),
        ] {
            for (l, layer) in layers.iter_mut().enumerate() {
                for (k, head) in layer.heads.iter_mut().enumerate() {
                    f(format!("{enc_name}.{l}.head.{k}.weight"), &mut head.weight);
                    f(
                        format!("{enc_name}.{l}.head.{k}.edge_weight"),
                        &mut head.edge_weight,
                    );
                    f(format!("{enc_name}.{l}.head.{k}.attn"), &mut head.attn);
                }
                f(format!("{enc_name}.{l}.residual"), &mut layer.residual);
            }
        }
        for (l, fp) in self.fusion.iter_mut().enumerate() {
            f(format!("fusion.{l}.hetero_vec"), &mut fp.hetero_vec);
            f(format!("fusion.{l}.query_vec"), &mut fp.query_vec);
        }
        f("mlp.w1".to_string(), &mut self.mlp.w1);
        f("mlp.b1".to_string(), &mut self.mlp.b1);
        f("mlp.w2".to_string(), &mut self.mlp.w2);
        f("mlp.b2".to_string(), &mut self.mlp.b2);
    }

    pub fn tensor_count(&self) -> usize {
        let mut count = 0;
        self.for_each(&mut |_, _| count += 1);
        count
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        self.for_each(&mut |_, t| shapes.push(t.shape()));
        shapes
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Squared L2 norms per tensor, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t.sq_norm().sqrt())));
        out
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: (usize, usize),
    data: Vec<f64>,
}

/// On-disk model snapshot: JSON header plus named flat arrays.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub registry: TypeRegistry,
    pub seed: u64,
    /// Train/val/test fractions the producing run used to split tasks.
    pub split: (f64, f64, f64),
    /// Probability threshold selected on the validation split.
    pub gamma: f64,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        registry: TypeRegistry,
        seed: u64,
        split: (f64, f64, f64),
        gamma: f64,
        params: &ModelParams,
    ) -> Checkpoint {
        let mut entries = Vec::new();
        params.for_each(&mut |name, t| {
            entries.push(ParamEntry {
                name,
                shape: t.shape(),
                data: t.data().to_vec(),
            })
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            registry,
            seed,
            split,
            gamma,
            params: entries,
        }
    }

    /// Rebuilds parameters, validating every name and shape against the
    /// stored config and registry.
    pub fn to_params(&self) -> Result<ModelParams, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(self.version));
        }
        self.config.validate()?;
        let mut params = ModelParams::zeros(&self.config, &self.registry);
        let mut lookup = std::collections::BTreeMap::new();
        for (ix, e) in self.params.iter().enumerate() {
            lookup.insert(e.name.clone(), ix);
        }
        let mut used = vec![false; self.params.len()];
        let mut error: Option<ModelError> = None;
        params.for_each_mut(&mut |name, t| {
            if error.is_some() {
                return;
            }
            match lookup.get(&name) {
                None => error = Some(ModelError::MissingParam(name)),
                Some(&ix) => {
                    let e = &self.params[ix];
                    if e.shape != t.shape() {
                        error = Some(ModelError::ShapeMismatch {
                            name,
                            expected: t.shape(),
                            actual: e.shape,
                        });
                        return;
                    }
                    *t = Tensor::from_vec(e.shape.0, e.shape.1, e.data.clone());
                    used[ix] = true;
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if let Some(ix) = used.iter().position(|u| !u) {
            return Err(ModelError::UnknownParam(self.params[ix].name.clone()));
        }
        Ok(params)
    }

    /// Serialized bytes; deterministic for identical contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
