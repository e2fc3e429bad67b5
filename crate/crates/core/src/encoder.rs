//! Graph transformer message passing, the virtual query node and the
//! query-fusion / structural encoding stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{text_encode, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Weights of one graph transformer layer. Per-head projections are stored
/// side by side as `d×d` matrices; head `h` owns columns `h·d_h..(h+1)·d_h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphTransformerLayer {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_edge: ParamId,
    pub w_out: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

/// Output of one layer: new states for the updated nodes plus the attention
/// weights per head, aligned with `edges` (self-loops last).
pub struct LayerOutput {
    pub states: Var,
    pub attention: Vec<Var>,
    /// `(src, dst)` for every attended edge, including self-loops.
    pub edges: Vec<(usize, usize)>,
}

impl GraphTransformerLayer {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        let mat = |store: &mut ParamStore, name: &str, rng: &mut R| {
            store.add_uniform(format!("{prefix}.{name}"), group, d, d, rng)
        };
        let w_query = mat(store, "w_query", rng);
        let w_key = mat(store, "w_key", rng);
        let w_value = mat(store, "w_value", rng);
        let w_edge = mat(store, "w_edge", rng);
        let w_out = mat(store, "w_out", rng);
        let ln_gain = store.add(
            format!("{prefix}.ln_gain"),
            group,
            Tensor::full(&[1, d], 1.0),
        );
        let ln_bias = store.add(format!("{prefix}.ln_bias"), group, Tensor::zeros(&[1, d]));
        Ok(GraphTransformerLayer {
            w_query,
            w_key,
            w_value,
            w_edge,
            w_out,
            ln_gain,
            ln_bias,
            heads,
            head_dim: d / heads,
        })
    }

    /// Updates nodes `first_target..N` of `h (N×d)`.
    ///
    /// Node `i` attends over its in-neighbours `j` (edges `j→i`) and itself:
    /// `score = ⟨Wq·h_i, Wk·h_j + We·e_ji⟩/√d_h`, softmax over the neighbourhood,
    /// message `Σ α (Wv·h_j + We·e_ji)`. The self-loop carries a zero edge
    /// vector. Heads are concatenated, projected by `W_out`, added to the
    /// residual and layer-normed. Returns `(N − first_target)×d` states.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h: Var,
        edge_states: Var,
        edges: &[(usize, usize)],
        first_target: usize,
    ) -> Result<LayerOutput> {
        let n = tape.value(h).rows();
        let d = tape.value(h).cols();
        if edges.len() != tape.value(edge_states).rows() {
            return Err(Error::shape(
                "gt_layer edges",
                &[edges.len()],
                tape.shape(edge_states),
            ));
        }
        if first_target > n {
            return Err(Error::Contract(format!(
                "first target {first_target} beyond {n} nodes"
            )));
        }
        let num_targets = n - first_target;

        let mut kept = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (e, &(s, t)) in edges.iter().enumerate() {
            if t >= first_target {
                kept.push(e);
                src.push(s);
                dst.push(t - first_target);
            }
        }
        let loops = tape.constant(Tensor::zeros(&[num_targets, d]));
        let attended_edges = if kept.is_empty() {
            loops
        } else {
            let real = tape.gather_rows(edge_states, &kept)?;
            tape.concat_rows(&[real, loops])?
        };
        for t in 0..num_targets {
            src.push(first_target + t);
            dst.push(t);
        }

        let targets = tape.slice_rows(h, first_target, num_targets)?;
        let q = tape.matmul(targets, p[self.w_query])?;
        let k = tape.matmul(h, p[self.w_key])?;
        let v = tape.matmul(h, p[self.w_value])?;
        let ep = tape.matmul(attended_edges, p[self.w_edge])?;

        let q_e = tape.gather_rows(q, &dst)?;
        let k_src = tape.gather_rows(k, &src)?;
        let k_e = tape.add(k_src, ep)?;
        let v_src = tape.gather_rows(v, &src)?;
        let v_e = tape.add(v_src, ep)?;

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_msgs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let off = hd * self.head_dim;
            let qh = tape.slice_cols(q_e, off, self.head_dim)?;
            let kh = tape.slice_cols(k_e, off, self.head_dim)?;
            let vh = tape.slice_cols(v_e, off, self.head_dim)?;
            let raw = tape.row_dot(qh, kh)?;
            let scores = tape.scale(raw, scale);
            let alpha = tape.segment_softmax(scores, &dst)?;
            let weighted = tape.mul_rows(vh, alpha)?;
            head_msgs.push(tape.scatter_add_rows(weighted, &dst, num_targets)?);
            attention.push(alpha);
        }
        let msg = tape.concat_cols(&head_msgs)?;
        let projected = tape.matmul(msg, p[self.w_out])?;
        let residual = tape.add(targets, projected)?;
        let states = tape.layer_norm(residual, p[self.ln_gain], p[self.ln_bias])?;
        Ok(LayerOutput {
            states,
            attention,
            edges: src
                .into_iter()
                .zip(dst.into_iter().map(|t| t + first_target))
                .collect(),
        })
    }
}

/// Precomputed text features of one graph and its query.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    pub nodes: Tensor,
    pub edges: Tensor,
    pub edge_index: Vec<(usize, usize)>,
    pub query: Tensor,
}

impl GraphFeatures {
    pub fn new(graph: &TextAttributedGraph, query: &str, d: usize) -> Result<Self> {
        let mut nodes = Vec::with_capacity(graph.num_nodes() * d);
        for n in graph.nodes() {
            nodes.extend(text_encode(&n.text, d)?);
        }
        let mut edges = Vec::with_capacity(graph.num_edges() * d);
        for e in graph.edges() {
            edges.extend(text_encode(&e.text, d)?);
        }
        Ok(GraphFeatures {
            nodes: Tensor::matrix(graph.num_nodes(), d, nodes)?,
            edges: Tensor::matrix(graph.num_edges(), d, edges)?,
            edge_index: graph.edges().iter().map(|e| (e.src, e.dst)).collect(),
            query: Tensor::row(text_encode(query, d)?),
        })
    }
}

/// Node and edge states of a graph on the tape, optionally with the virtual
/// query node appended as the last row.
#[derive(Clone, Debug)]
pub struct EncodedGraph {
    pub node_states: Var,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_states: Var,
    pub query_node_index: Option<usize>,
    /// Nodes of the underlying graph, i.e. rows before the query node.
    pub num_graph_nodes: usize,
}

/// Node row `i` is the encoded text of node `i`; edge row `e` that of edge `e`.
pub fn init_node_edge_states(tape: &mut Tape, features: &GraphFeatures) -> EncodedGraph {
    EncodedGraph {
        node_states: tape.constant(features.nodes.clone()),
        edge_index: features.edge_index.clone(),
        edge_states: tape.constant(features.edges.clone()),
        query_node_index: None,
        num_graph_nodes: features.nodes.rows(),
    }
}

/// Appends the query node with bidirectional links to every graph node. All
/// query links share the learned `query_link` edge vector.
pub fn attach_query_node(
    tape: &mut Tape,
    eg: &EncodedGraph,
    query_vec: Var,
    query_link: Var,
) -> Result<EncodedGraph> {
    if eg.query_node_index.is_some() {
        return Err(Error::Contract("query node already attached".into()));
    }
    let k = eg.num_graph_nodes;
    let node_states = tape.concat_rows(&[eg.node_states, query_vec])?;
    let mut edge_index = eg.edge_index.clone();
    for i in 0..k {
        edge_index.push((k, i));
        edge_index.push((i, k));
    }
    let links = tape.gather_rows(query_link, &vec![0; 2 * k])?;
    let edge_states = tape.concat_rows(&[eg.edge_states, links])?;
    Ok(EncodedGraph {
        node_states,
        edge_index,
        edge_states,
        query_node_index: Some(k),
        num_graph_nodes: k,
    })
}

/// Runs `layers` over every present node. Adds one to `counter` per node update.
pub fn run_layers(
    tape: &mut Tape,
    p: &Bound,
    layers: &[GraphTransformerLayer],
    eg: &EncodedGraph,
    counter: &mut usize,
) -> Result<EncodedGraph> {
    let mut h = eg.node_states;
    for layer in layers {
        let out = layer.forward(tape, p, h, eg.edge_states, &eg.edge_index, 0)?;
        *counter += tape.value(h).rows();
        h = out.states;
    }
    Ok(EncodedGraph {
        node_states: h,
        ..eg.clone()
    })
}

/// Query-fusion message passing over the graph augmented with the query node.
pub fn run_gnn_query(
    tape: &mut Tape,
    p: &Bound,
    layers: &[GraphTransformerLayer],
    eg: &EncodedGraph,
    counter: &mut usize,
) -> Result<EncodedGraph> {
    if eg.query_node_index.is_none() {
        return Err(Error::Contract(
            "query fusion needs an attached query node".into(),
        ));
    }
    run_layers(tape, p, layers, eg, counter)
}

/// Structural encoding over all present nodes (query node included when attached).
pub fn run_gnn_graph(
    tape: &mut Tape,
    p: &Bound,
    layers: &[GraphTransformerLayer],
    eg: &EncodedGraph,
    counter: &mut usize,
) -> Result<EncodedGraph> {
    run_layers(tape, p, layers, eg, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{max_op_gradient_error, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(d: usize, heads: usize, seed: u64) -> (ParamStore, GraphTransformerLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let l = GraphTransformerLayer::init(&mut s, "l", "g", d, heads, &mut rng).unwrap();
        (s, l)
    }

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GraphTransformerLayer::init(&mut s, "l", "g", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn isolated_node_attends_only_to_itself() {
        let (s, l) = layer(8, 2, 1);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let h = tape.constant(random_tensor(&[2, 8], &mut ChaCha8Rng::seed_from_u64(2)));
        let e = tape.constant(Tensor::zeros(&[0, 8]));
        let out = l.forward(&mut tape, &p, h, e, &[], 0).unwrap();
        for a in &out.attention {
            assert_eq!(tape.value(*a).data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn symmetric_neighbours_get_equal_weight() {
        let (s, l) = layer(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = random_tensor(&[1, 8], &mut rng);
        let target = random_tensor(&[1, 8], &mut rng);
        let h0 = Tensor::from_rows(&[
            target.data().to_vec(),
            row.data().to_vec(),
            row.data().to_vec(),
        ])
        .unwrap();
        let er = random_tensor(&[1, 8], &mut rng);
        let e0 = Tensor::from_rows(&[er.data().to_vec(), er.data().to_vec()]).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let h = tape.constant(h0);
        let e = tape.constant(e0);
        let out = l
            .forward(&mut tape, &p, h, e, &[(1, 0), (2, 0)], 0)
            .unwrap();
        for a in &out.attention {
            let w = tape.value(*a).data();
            // edges (1,0), (2,0) come first
            assert_eq!(w[0], w[1]);
            let into_zero: f64 = out
                .edges
                .iter()
                .zip(w)
                .filter(|((_, t), _)| *t == 0)
                .map(|(_, a)| a)
                .sum();
            assert!((into_zero - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let (s, l) = layer(8, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut inputs = vec![
            random_tensor(&[4, 8], &mut rng),
            random_tensor(&[3, 8], &mut rng),
        ];
        let weight_ids = [
            l.w_query, l.w_key, l.w_value, l.w_edge, l.w_out, l.ln_gain, l.ln_bias,
        ];
        inputs.extend(weight_ids.iter().map(|&id| s.value(id).clone()));
        let edges = [(0, 1), (2, 1), (3, 0)];
        let err = max_op_gradient_error(&inputs, 9, |tape, v| {
            // store order matches `weight_ids`
            let bound = Bound::from_vars(v[2..].to_vec());
            Ok(l.forward(tape, &bound, v[0], v[1], &edges, 0)?.states)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn query_node_wiring() {
        let g = TextAttributedGraph::new(
            (0..5).map(|i| format!("n{i}")).collect(),
            vec![(0, "r".into(), 1), (3, "r".into(), 4)],
        )
        .unwrap();
        let f = GraphFeatures::new(&g, "what is it", 16).unwrap();
        let mut tape = Tape::new();
        let eg = init_node_edge_states(&mut tape, &f);
        assert_eq!(tape.shape(eg.node_states), &[5, 16]);
        let q = tape.constant(f.query.clone());
        let link = tape.constant(Tensor::row(vec![0.5; 16]));
        let with_q = attach_query_node(&mut tape, &eg, q, link).unwrap();
        assert_eq!(tape.value(with_q.node_states).rows(), 6);
        assert_eq!(with_q.edge_index.len(), 2 + 10);
        assert_eq!(with_q.query_node_index, Some(5));
        let orig = tape.value(eg.edge_states).data().to_vec();
        assert_eq!(
            &tape.value(with_q.edge_states).data()[..orig.len()],
            &orig[..]
        );
        assert!(attach_query_node(&mut tape, &with_q, q, link).is_err());
    }

    #[test]
    fn identical_texts_give_identical_rows() {
        let g = TextAttributedGraph::new(
            vec!["dog".into(), "dog".into()],
            vec![(0, "sees".into(), 1)],
        )
        .unwrap();
        let f = GraphFeatures::new(&g, "q", 16).unwrap();
        assert_eq!(f.nodes.shape(), &[2, 16]);
        assert_eq!(f.nodes.row_slice(0), f.nodes.row_slice(1));
        assert_eq!(f.edges.rows(), 1);
    }
}
