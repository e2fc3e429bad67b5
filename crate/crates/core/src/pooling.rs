//! Readouts from node states to prompt vectors: learnable graph pooling
//! tokens, mean pooling, late-fusion cross-attention and the projection MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedGraph, GraphTransformerLayer};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the pooling-token initialization. Independent draws
/// keep token rows distinct; identical rows would stay identical forever.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LgptParams {
    /// `n×d` learnable pooling tokens.
    pub tokens: ParamId,
    /// Edge vector shared by every node→token link.
    pub pool_link: ParamId,
    pub layers: Vec<GraphTransformerLayer>,
    pub num_tokens: usize,
}

impl LgptParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        n: usize,
        d: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("need at least one pooling token".into()));
        }
        let tokens = store.add_normal("lgpt.tokens", "lgpt", n, d, TOKEN_INIT_STD, rng);
        let pool_link = store.add_uniform("gnn_pool.link", "gnn_pool", 1, d, rng);
        let layers = (0..depth)
            .map(|l| {
                GraphTransformerLayer::init(
                    store,
                    &format!("gnn_pool.{l}"),
                    "gnn_pool",
                    d,
                    heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(LgptParams {
            tokens,
            pool_link,
            layers,
            num_tokens: n,
        })
    }
}

/// Token nodes linked from every source node (directed node→token, all
/// carrying `pool_link`) are updated by the pooling layers; source node states
/// never change. Returns the `n×d` pooled tokens.
pub fn lgpt_pool(
    tape: &mut Tape,
    p: &Bound,
    eg: &EncodedGraph,
    lgpt: &LgptParams,
    include_query: bool,
    counter: &mut usize,
) -> Result<Var> {
    let sources = if include_query || eg.query_node_index.is_none() {
        eg.node_states
    } else {
        tape.slice_rows(eg.node_states, 0, eg.num_graph_nodes)?
    };
    let num_sources = tape.value(sources).rows();
    let n = lgpt.num_tokens;
    let mut edges = Vec::with_capacity(num_sources * n);
    for t in 0..n {
        for j in 0..num_sources {
            edges.push((j, num_sources + t));
        }
    }
    let links = tape.gather_rows(p[lgpt.pool_link], &vec![0; edges.len()])?;
    let mut tokens = p[lgpt.tokens];
    for layer in &lgpt.layers {
        let h = tape.concat_rows(&[sources, tokens])?;
        tokens = layer
            .forward(tape, p, h, links, &edges, num_sources)?
            .states;
        *counter += n;
    }
    Ok(tokens)
}

/// Mean of the graph node rows, `1×d`. The query node is excluded unless asked for.
pub fn mean_pool(tape: &mut Tape, eg: &EncodedGraph, include_query: bool) -> Result<Var> {
    let rows = if include_query || eg.query_node_index.is_none() {
        eg.node_states
    } else {
        tape.slice_rows(eg.node_states, 0, eg.num_graph_nodes)?
    };
    tape.mean_rows(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LateFusionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl LateFusionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        LateFusionParams {
            w_query: store.add_uniform("late_fusion.w_query", "late_fusion", d, d, rng),
            w_key: store.add_uniform("late_fusion.w_key", "late_fusion", d, d, rng),
            w_value: store.add_uniform("late_fusion.w_value", "late_fusion", d, d, rng),
            ln_gain: store.add(
                "late_fusion.ln_gain",
                "late_fusion",
                Tensor::full(&[1, d], 1.0),
            ),
            ln_bias: store.add("late_fusion.ln_bias", "late_fusion", Tensor::zeros(&[1, d])),
        }
    }
}

/// Single-head cross-modality pooling applied after readout:
/// `row_i ← LN(row_i + α_i·Wv·q)` with `α = softmax_i(⟨Wq·row_i, Wk·q⟩/√d)`
/// taken across rows.
pub fn late_fusion_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &LateFusionParams,
    prompt_in: Var,
    query_vec: Var,
) -> Result<Var> {
    let d = tape.value(prompt_in).cols();
    let q_rows = tape.matmul(prompt_in, p[params.w_query])?;
    let k_query = tape.matmul(query_vec, p[params.w_key])?;
    let k_t = tape.transpose(k_query);
    let raw = tape.matmul(q_rows, k_t)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let as_row = tape.transpose(scores);
    let alpha_row = tape.softmax_rows(as_row);
    let alpha = tape.transpose(alpha_row);
    let v_query = tape.matmul(query_vec, p[params.w_value])?;
    let added = tape.matmul(alpha, v_query)?;
    let mixed = tape.add(prompt_in, added)?;
    tape.layer_norm(mixed, p[params.ln_gain], p[params.ln_bias])
}

/// Two affine layers `d → d_mlp → d_llm` with GELU between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl ProjectionMlp {
    /// Hidden width is `2·d_llm`.
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, d_llm: usize, rng: &mut R) -> Self {
        let hidden = 2 * d_llm;
        ProjectionMlp {
            w1: store.add_uniform("proj.w1", "proj", d, hidden, rng),
            b1: store.add("proj.b1", "proj", Tensor::zeros(&[1, hidden])),
            w2: store.add_uniform("proj.w2", "proj", hidden, d_llm, rng),
            b2: store.add("proj.b2", "proj", Tensor::zeros(&[1, d_llm])),
            d_in: d,
            d_out: d_llm,
        }
    }
}

/// Which readout produced a set of prompt vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Lgpt,
    Mean,
    LateFused,
    PromptTuning,
}

/// Rows to prepend to the LM input, already in LM embedding width.
#[derive(Clone, Copy, Debug)]
pub struct PromptVectors {
    pub rows: Var,
    pub provenance: Provenance,
}

pub fn project(
    tape: &mut Tape,
    p: &Bound,
    tokens: Var,
    mlp: &ProjectionMlp,
    provenance: Provenance,
) -> Result<PromptVectors> {
    if tape.value(tokens).cols() != mlp.d_in {
        return Err(Error::Config(format!(
            "projection expects width {}, got {:?}",
            mlp.d_in,
            tape.shape(tokens)
        )));
    }
    let h = tape.matmul(tokens, p[mlp.w1])?;
    let h = tape.add_row(h, p[mlp.b1])?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p[mlp.w2])?;
    let rows = tape.add_row(out, p[mlp.b2])?;
    Ok(PromptVectors { rows, provenance })
}
