//! Forward pass: graph preparation, the edge-semantic attention layer, view
//! fusion, and the scoring head.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::graph::HeteroGraph;

use super::{LayerParams, ModelConfig, ModelError, ModelParams};

/// Negative slope of the attention LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Hetero,
    Query,
}

/// Graph flattened into the arrays the forward pass consumes. Building one is
/// O(V + E); reuse it across queries on the same graph.
pub struct PreparedGraph {
    node_count: usize,
    /// Per present node type: `(type id, feature rows in member order)`.
    type_chunks: Vec<(usize, Tensor)>,
    /// Node -> row in the concatenation of the per-type projection outputs.
    assemble_perm: Arc<Vec<usize>>,
    /// Flat edge arrays, destination-major in canonical neighbor order.
    edge_src: Arc<Vec<usize>>,
    edge_dst: Arc<Vec<usize>>,
    /// Per edge: row into `[edge_embed; dataset_features]`.
    edge_feat_row: Arc<Vec<usize>>,
    /// Packed dataset-provided edge features, when any type carries them.
    dataset_feats: Option<Tensor>,
}

impl PreparedGraph {
    pub fn new(graph: &HeteroGraph) -> PreparedGraph {
        let n = graph.node_count();
        let registry = graph.registry();
        let num_edge_types = registry.edge_types.len();

        let mut type_chunks = Vec::new();
        let mut assemble_perm = vec![0usize; n];
        let mut offset = 0;
        for (tix, info) in registry.node_types.iter().enumerate() {
            let members = graph.type_members(crate::graph::NodeTypeId(tix));
            if members.is_empty() {
                continue;
            }
            for (rank, &v) in members.iter().enumerate() {
                assemble_perm[v] = offset + rank;
            }
            offset += members.len();
            let rows = Tensor::from_vec(
                members.len(),
                info.feature_dim,
                graph
                    .type_feature_table(crate::graph::NodeTypeId(tix))
                    .to_vec(),
            );
            type_chunks.push((tix, rows));
        }

        // Edge-feature widths must agree so rows pack into one matrix.
        let mut feat_dim = None;
        for info in &registry.edge_types {
            if let Some(d) = info.feature_dim {
                match feat_dim {
                    None => feat_dim = Some(d),
                    Some(prev) => assert_eq!(
                        prev, d,
                        "edge types with dataset features must share one width"
                    ),
                }
            }
        }

        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut edge_feat_row = Vec::new();
        let mut packed = Vec::new();
        let mut packed_rows = 0usize;
        for dst in 0..n {
            for (src, etype, eix) in graph.neighbors_unchecked(dst) {
                edge_dst.push(dst);
                edge_src.push(src);
                match graph.edge_features(etype, eix) {
                    Some(row) => {
                        packed.extend_from_slice(row);
                        edge_feat_row.push(num_edge_types + packed_rows);
                        packed_rows += 1;
                    }
                    None => edge_feat_row.push(etype.0),
                }
            }
        }
        let dataset_feats =
            feat_dim.map(|d| Tensor::from_vec(packed_rows, d, packed));

        PreparedGraph {
            node_count: n,
            type_chunks,
            assemble_perm: Arc::new(assemble_perm),
            edge_src: Arc::new(edge_src),
            edge_dst: Arc::new(edge_dst),
            edge_feat_row: Arc::new(edge_feat_row),
            dataset_feats,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_src.len()
    }

    fn check_model(&self, config: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
        if let Some(f) = &self.dataset_feats {
            if f.cols() != config.edge_dim {
                return Err(ModelError::EdgeDimMismatch {
                    expected: config.edge_dim,
                    actual: f.cols(),
                });
            }
        }
        for (tix, rows) in &self.type_chunks {
            match params.proj.get(*tix) {
                Some(w) if w.rows() == rows.cols() => {}
                _ => {
                    return Err(ModelError::MissingProjection(format!("type #{tix}")));
                }
            }
        }
        Ok(())
    }
}

/// Mirror of [`ModelParams`] as tape variables. Upload order matches
/// `ModelParams::for_each`.
pub struct ParamVars {
    pub proj: Vec<Var>,
    pub edge_embed: Var,
    pub hetero: Vec<LayerVars>,
    pub query: Vec<LayerVars>,
    pub fusion: Vec<(Var, Var)>,
    pub mlp: (Var, Var, Var, Var),
}

pub struct LayerVars {
    pub heads: Vec<HeadVars>,
    pub residual: Var,
}

pub struct HeadVars {
    pub weight: Var,
    pub edge_weight: Var,
    pub attn: Var,
}

impl ParamVars {
    fn upload(tape: &mut Tape, params: &ModelParams) -> ParamVars {
        let proj = params.proj.iter().map(|t| tape.param(t.clone())).collect();
        let edge_embed = tape.param(params.edge_embed.clone());
        let upload_layers = |tape: &mut Tape, layers: &[LayerParams]| -> Vec<LayerVars> {
            layers
                .iter()
                .map(|layer| LayerVars {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| HeadVars {
                            weight: tape.param(h.weight.clone()),
                            edge_weight: tape.param(h.edge_weight.clone()),
                            attn: tape.param(h.attn.clone()),
                        })
                        .collect(),
                    residual: tape.param(layer.residual.clone()),
                })
                .collect()
        };
        let hetero = upload_layers(tape, &params.hetero);
        let query = upload_layers(tape, &params.query);
        let fusion = params
            .fusion
            .iter()
            .map(|f| {
                (
                    tape.param(f.hetero_vec.clone()),
                    tape.param(f.query_vec.clone()),
                )
            })
            .collect();
        let mlp = (
            tape.param(params.mlp.w1.clone()),
            tape.param(params.mlp.b1.clone()),
            tape.param(params.mlp.w2.clone()),
            tape.param(params.mlp.b2.clone()),
        );
        ParamVars {
            proj,
            edge_embed,
            hetero,
            query,
            fusion,
            mlp,
        }
    }

    /// Vars in `ModelParams::for_each` order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(self.proj.iter().copied());
        out.push(self.edge_embed);
        for layers in [&self.hetero, &self.query] {
            for layer in layers.iter() {
                for head in &layer.heads {
                    out.push(head.weight);
                    out.push(head.edge_weight);
                    out.push(head.attn);
                }
                out.push(layer.residual);
            }
        }
        for &(u, uq) in &self.fusion {
            out.push(u);
            out.push(uq);
        }
        out.push(self.mlp.0);
        out.push(self.mlp.1);
        out.push(self.mlp.2);
        out.push(self.mlp.3);
        out
    }
}

/// Dropout behavior of one forward pass.
pub enum DropoutMode<'a> {
    Eval,
    Train { rate: f64, rng: &'a mut ChaCha20Rng },
}

/// Per-head attention weights captured during a forward pass.
pub struct AttentionRecord {
    pub encoder: EncoderKind,
    pub layer: usize,
    pub head: usize,
    pub alpha: Var,
    pub edge_dst: Arc<Vec<usize>>,
}

pub struct ForwardResult {
    pub tape: Tape,
    /// `n x 1` membership probabilities.
    pub prob: Var,
    pub param_vars: ParamVars,
    /// Final-layer hetero encoder output (query-independent).
    pub hetero_out: Var,
    pub attention: Vec<AttentionRecord>,
}

impl ForwardResult {
    pub fn probabilities(&self) -> Vec<f64> {
        self.tape.value(self.prob).data().to_vec()
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, mode: &mut DropoutMode) -> Var {
    match mode {
        DropoutMode::Eval => x,
        DropoutMode::Train { rate, rng } => {
            if *rate <= 0.0 {
                return x;
            }
            let shape = tape.value(x).shape();
            let keep = 1.0 - *rate;
            let mask: Vec<f64> = (0..shape.0 * shape.1)
                .map(|_| {
                    if rng.random::<f64>() < *rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            let mask = tape.constant(Tensor::from_vec(shape.0, shape.1, mask));
            tape.mul(x, mask)
        }
    }
}

/// One encoder layer on the tape: per-head edge attention, aggregation,
/// head concatenation, residual, ELU.
#[allow(clippy::too_many_arguments)]
fn encoder_layer(
    tape: &mut Tape,
    prepared: &PreparedGraph,
    h_in: Var,
    layer: &LayerVars,
    edge_feats: Var,
    head_dim: usize,
    attention_sink: Option<(&mut Vec<AttentionRecord>, EncoderKind, usize)>,
) -> Var {
    let n = prepared.node_count;
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    let mut records = Vec::new();
    for (k, head) in layer.heads.iter().enumerate() {
        let wh = tape.matmul(h_in, head.weight);
        let a_dst = tape.slice_rows(head.attn, 0, head_dim);
        let a_src = tape.slice_rows(head.attn, head_dim, head_dim);
        let a_edge = tape.slice_rows(head.attn, 2 * head_dim, head_dim);
        let s_dst = tape.matmul(wh, a_dst);
        let s_src = tape.matmul(wh, a_src);
        // (E W_e) a_edge computed as E (W_e a_edge): one m x 1 column
        // instead of an m x head_dim intermediate.
        let we_a = tape.matmul(head.edge_weight, a_edge);
        let s_edge = tape.matmul(edge_feats, we_a);
        let sd = tape.gather_rows(s_dst, Arc::clone(&prepared.edge_dst));
        let ss = tape.gather_rows(s_src, Arc::clone(&prepared.edge_src));
        let sum = tape.add(sd, ss);
        let raw = tape.add(sum, s_edge);
        let act = tape.leaky_relu(raw, LEAKY_SLOPE);
        let alpha = tape.segment_softmax(act, Arc::clone(&prepared.edge_dst));
        if attention_sink.is_some() {
            records.push((k, alpha));
        }
        let agg = tape.attn_aggregate(
            wh,
            alpha,
            Arc::clone(&prepared.edge_src),
            Arc::clone(&prepared.edge_dst),
            n,
        );
        head_outputs.push(agg);
    }
    let multi = tape.concat_cols(&head_outputs);
    let res = tape.matmul(h_in, layer.residual);
    let pre = tape.add(multi, res);
    if let Some((sink, encoder, l)) = attention_sink {
        for (k, alpha) in records {
            sink.push(AttentionRecord {
                encoder,
                layer: l,
                head: k,
                alpha,
                edge_dst: Arc::clone(&prepared.edge_dst),
            });
        }
    }
    tape.elu(pre)
}

/// Full forward pass for one query on a prepared graph.
///
/// The heterogeneous chain feeds its own layer outputs forward and never sees
/// the query; the query chain starts from the one-hot indicator and consumes
/// the fused representation after each layer. The final fused representation
/// goes through the MLP + sigmoid head.
pub fn forward(
    prepared: &PreparedGraph,
    query: usize,
    params: &ModelParams,
    config: &ModelConfig,
    mut dropout: DropoutMode,
    record_attention: bool,
) -> Result<ForwardResult, ModelError> {
    config.validate()?;
    prepared.check_model(config, params)?;
    assert!(
        query < prepared.node_count,
        "query node {query} out of range ({} nodes)",
        prepared.node_count
    );
    let mut tape = Tape::new();
    let vars = ParamVars::upload(&mut tape, params);
    let n = prepared.node_count;
    let head_dim = config.head_dim();

    // Projected features, assembled back into node order.
    let mut chunks = Vec::with_capacity(prepared.type_chunks.len());
    for (tix, rows) in &prepared.type_chunks {
        let x = tape.constant(rows.clone());
        chunks.push(tape.matmul(x, vars.proj[*tix]));
    }
    let stacked = tape.concat_rows(&chunks);
    let h0 = tape.gather_rows(stacked, Arc::clone(&prepared.assemble_perm));

    // One-hot query indicator.
    let mut indicator = vec![0.0; n];
    indicator[query] = 1.0;
    let xq = tape.constant(Tensor::column(indicator));

    // Edge feature rows: learned embeddings, with dataset rows appended so a
    // single gather serves both paths.
    let edge_matrix = match &prepared.dataset_feats {
        Some(f) => {
            let c = tape.constant(f.clone());
            tape.concat_rows(&[vars.edge_embed, c])
        }
        None => vars.edge_embed,
    };
    let edge_feats = tape.gather_rows(edge_matrix, Arc::clone(&prepared.edge_feat_row));

    let mut attention = Vec::new();
    let mut hetero_prev = h0;
    let mut query_prev = xq;
    let mut fused = xq; // replaced in the first iteration
    for l in 0..config.layers {
        let h_in = apply_dropout(&mut tape, hetero_prev, &mut dropout);
        let h_out = encoder_layer(
            &mut tape,
            prepared,
            h_in,
            &vars.hetero[l],
            edge_feats,
            head_dim,
            record_attention.then_some((&mut attention, EncoderKind::Hetero, l)),
        );
        let q_in = apply_dropout(&mut tape, query_prev, &mut dropout);
        let q_out = encoder_layer(
            &mut tape,
            prepared,
            q_in,
            &vars.query[l],
            edge_feats,
            head_dim,
            record_attention.then_some((&mut attention, EncoderKind::Query, l)),
        );

        let (u, uq) = vars.fusion[l];
        let e_h = tape.matmul(h_out, u);
        let e_q = tape.matmul(q_out, uq);
        let diff = tape.sub(e_h, e_q);
        let beta = tape.sigmoid(diff);
        let neg = tape.scale(beta, -1.0);
        let beta_q = tape.add_scalar(neg, 1.0);
        let weighted_h = tape.scale_rows(h_out, beta);
        let weighted_q = tape.scale_rows(q_out, beta_q);
        fused = tape.add(weighted_h, weighted_q);

        hetero_prev = h_out;
        query_prev = fused;
    }

    let (w1, b1, w2, b2) = vars.mlp;
    let z1 = tape.matmul(fused, w1);
    let z1 = tape.add_row(z1, b1);
    let a1 = tape.elu(z1);
    let z2 = tape.matmul(a1, w2);
    let z2 = tape.add_row(z2, b2);
    let prob = tape.sigmoid(z2);

    Ok(ForwardResult {
        tape,
        prob,
        param_vars: vars,
        hetero_out: hetero_prev,
        attention,
    })
}

/// Evaluation-mode probabilities for every node.
pub fn predict(
    prepared: &PreparedGraph,
    query: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>, ModelError> {
    let result = forward(prepared, query, params, config, DropoutMode::Eval, false)?;
    Ok(result.probabilities())
}

/// Gradients for every parameter tensor, zeros where the loss never reached
/// a tensor, in `ModelParams::for_each` order.
pub fn collect_gradients(
    param_vars: &ParamVars,
    grads: &Gradients,
    params: &ModelParams,
) -> Vec<Tensor> {
    let vars = param_vars.flat();
    let shapes = params.shapes();
    debug_assert_eq!(vars.len(), shapes.len());
    vars.iter()
        .zip(shapes)
        .map(|(&v, shape)| grads.get_or_zeros(v, shape))
        .collect()
}

/// Per-type projection into the unified space: row `i` is
/// `x[v_i] * W_{type(v_i)}`.
pub fn project_features(
    prepared: &PreparedGraph,
    params: &ModelParams,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let mut chunks = Vec::with_capacity(prepared.type_chunks.len());
    for (tix, rows) in &prepared.type_chunks {
        let w = params
            .proj
            .get(*tix)
            .filter(|w| w.rows() == rows.cols())
            .ok_or_else(|| ModelError::MissingProjection(format!("type #{tix}")))?;
        let x = tape.constant(rows.clone());
        let wv = tape.constant(w.clone());
        chunks.push(tape.matmul(x, wv));
    }
    let stacked = tape.concat_rows(&chunks);
    let h0 = tape.gather_rows(stacked, Arc::clone(&prepared.assemble_perm));
    Ok(tape.value(h0).clone())
}

/// One-hot indicator column for the query node.
pub fn query_indicator(node_count: usize, query: usize) -> Tensor {
    assert!(query < node_count, "query {query} out of range");
    let mut v = vec![0.0; node_count];
    v[query] = 1.0;
    Tensor::column(v)
}

/// Two-view fusion: per-node logits `u . h` and `u_q . h_q`, a two-way
/// softmax, and the convex combination of the rows.
pub fn fuse_values(h: &Tensor, hq: &Tensor, u: &Tensor, uq: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let qv = tape.constant(hq.clone());
    let uv = tape.constant(u.clone());
    let uqv = tape.constant(uq.clone());
    let e_h = tape.matmul(hv, uv);
    let e_q = tape.matmul(qv, uqv);
    let diff = tape.sub(e_h, e_q);
    let beta = tape.sigmoid(diff);
    let neg = tape.scale(beta, -1.0);
    let beta_q = tape.add_scalar(neg, 1.0);
    let wh = tape.scale_rows(hv, beta);
    let wq = tape.scale_rows(qv, beta_q);
    let fused = tape.add(wh, wq);
    tape.value(fused).clone()
}

/// Attention weights of one head over a whole graph:
/// `(alpha, edge_src, edge_dst)` in canonical edge order.
pub fn edge_attention_values(
    graph: &HeteroGraph,
    h_in: &Tensor,
    head: &super::HeadParams,
    edge_embed: &Tensor,
    head_dim: usize,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let prepared = PreparedGraph::new(graph);
    let mut tape = Tape::new();
    let h = tape.constant(h_in.clone());
    let layer_vars = LayerVars {
        heads: vec![HeadVars {
            weight: tape.param(head.weight.clone()),
            edge_weight: tape.param(head.edge_weight.clone()),
            attn: tape.param(head.attn.clone()),
        }],
        residual: tape.param(Tensor::zeros(h_in.cols(), head_dim)),
    };
    let embed = tape.constant(edge_embed.clone());
    let edge_matrix = match &prepared.dataset_feats {
        Some(f) => {
            let c = tape.constant(f.clone());
            tape.concat_rows(&[embed, c])
        }
        None => embed,
    };
    let edge_feats = tape.gather_rows(edge_matrix, Arc::clone(&prepared.edge_feat_row));
    let mut records = Vec::new();
    let _ = encoder_layer(
        &mut tape,
        &prepared,
        h,
        &layer_vars,
        edge_feats,
        head_dim,
        Some((&mut records, EncoderKind::Hetero, 0)),
    );
    let alpha = tape.value(records[0].alpha).data().to_vec();
    (
        alpha,
        prepared.edge_src.as_ref().clone(),
        prepared.edge_dst.as_ref().clone(),
    )
}

/// Single encoder layer evaluated outside any model wiring, for oracle
/// comparisons: plain tensors in, plain tensor out.
pub fn encoder_layer_values(
    graph: &HeteroGraph,
    h_in: &Tensor,
    layer: &LayerParams,
    edge_embed: &Tensor,
    head_dim: usize,
) -> Tensor {
    let prepared = PreparedGraph::new(graph);
    let mut tape = Tape::new();
    let h = tape.constant(h_in.clone());
    let layer_vars = LayerVars {
        heads: layer
            .heads
            .iter()
            .map(|hp| HeadVars {
                weight: tape.param(hp.weight.clone()),
                edge_weight: tape.param(hp.edge_weight.clone()),
                attn: tape.param(hp.attn.clone()),
            })
            .collect(),
        residual: tape.param(layer.residual.clone()),
    };
    let embed = tape.constant(edge_embed.clone());
    let edge_matrix = match &prepared.dataset_feats {
        Some(f) => {
            let c = tape.constant(f.clone());
            tape.concat_rows(&[embed, c])
        }
        None => embed,
    };
    let edge_feats = tape.gather_rows(edge_matrix, Arc::clone(&prepared.edge_feat_row));
    let out = encoder_layer(
        &mut tape, &prepared, h, &layer_vars, edge_feats, head_dim, None,
    );
    tape.value(out).clone()
}
