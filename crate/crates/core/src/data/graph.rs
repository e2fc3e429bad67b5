use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub text: String,
}

/// Graph whose nodes and edges carry text. Node ids are always `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextAttributedGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// The malformations graph validation rejects.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GraphDefect {
    #[error("duplicate node id {0}")]
    DuplicateNode(i64),
    #[error("edge {index} references missing node {node}")]
    DanglingEdge { index: usize, node: i64 },
    #[error("node {0} has empty text")]
    EmptyNodeText(i64),
    #[error("edge {0} has empty text")]
    EmptyEdgeText(usize),
    #[error("graph has no nodes")]
    NoNodes,
}

impl TextAttributedGraph {
    /// Builds a graph from arbitrary unique node ids, remapping them to
    /// `0..n` in ascending order of the original id.
    pub fn from_raw(
        nodes: Vec<(i64, String)>,
        edges: Vec<(i64, i64, String)>,
    ) -> Result<Self, GraphDefect> {
        if nodes.is_empty() {
            return Err(GraphDefect::NoNodes);
        }
        let mut sorted = nodes;
        sorted.sort_by_key(|(id, _)| *id);
        let mut remap = HashMap::with_capacity(sorted.len());
        for (new, (old, text)) in sorted.iter().enumerate() {
            if text.trim().is_empty() {
                return Err(GraphDefect::EmptyNodeText(*old));
            }
            if remap.insert(*old, new).is_some() {
                return Err(GraphDefect::DuplicateNode(*old));
            }
        }
        let mut out_edges = Vec::with_capacity(edges.len());
        for (index, (src, dst, text)) in edges.into_iter().enumerate() {
            let lookup = |node: i64| {
                remap
                    .get(&node)
                    .copied()
                    .ok_or(GraphDefect::DanglingEdge { index, node })
            };
            let (s, d) = (lookup(src)?, lookup(dst)?);
            if text.trim().is_empty() {
                return Err(GraphDefect::EmptyEdgeText(index));
            }
            out_edges.push(Edge {
                src: s,
                dst: d,
                text,
            });
        }
        let nodes = sorted
            .into_iter()
            .enumerate()
            .map(|(id, (_, text))| Node { id, text })
            .collect();
        Ok(TextAttributedGraph {
            nodes,
            edges: out_edges,
        })
    }

    /// Node texts in id order; edges as `(src, text, dst)`.
    pub fn new(
        node_texts: Vec<String>,
        edges: Vec<(usize, String, usize)>,
    ) -> Result<Self, GraphDefect> {
        TextAttributedGraph::from_raw(
            node_texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| (i as i64, t))
                .collect(),
            edges
                .into_iter()
                .map(|(s, t, d)| (s as i64, d as i64, t))
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_text(&self, id: usize) -> &str {
        &self.nodes[id].text
    }

    pub fn find_node(&self, text: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.text == text)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`; edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes.len());
        let mut texts = vec![String::new(); perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            texts[new] = self.nodes[old].text.clone();
        }
        let nodes = texts
            .into_iter()
            .enumerate()
            .map(|(id, text)| Node { id, text })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                text: e.text.clone(),
            })
            .collect();
        TextAttributedGraph { nodes, edges }
    }

    /// Flat template: `id,text` per node in id order, a blank line, then
    /// `src,text,dst` per edge in input order.
    pub fn textualize(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("{},{}\n", n.id, n.text));
        }
        out.push('\n');
        let edges: Vec<String> = self
            .edges
            .iter()
            .map(|e| format!("{},{},{}", e.src, e.text, e.dst))
            .collect();
        out.push_str(&edges.join("\n"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    #[test]
    fn textualize_minimal_graph() {
        let g = TextAttributedGraph::new(vec![s("dog")], vec![]).unwrap();
        assert_eq!(g.textualize(), "0,dog\n\n");
    }

    #[test]
    fn textualize_with_edge() {
        let g =
            TextAttributedGraph::new(vec![s("dog"), s("cat")], vec![(0, s("chases"), 1)]).unwrap();
        assert_eq!(g.textualize(), "0,dog\n1,cat\n\n0,chases,1");
    }

    #[test]
    fn ids_are_remapped_in_ascending_order() {
        let g =
            TextAttributedGraph::from_raw(vec![(40, s("b")), (7, s("a"))], vec![(40, 7, s("to"))])
                .unwrap();
        assert_eq!(g.node_text(0), "a");
        assert_eq!(
            g.edges()[0],
            Edge {
                src: 1,
                dst: 0,
                text: s("to")
            }
        );
    }

    #[test]
    fn permutation_relabels_edges() {
        let g =
            TextAttributedGraph::new(vec![s("a"), s("b"), s("c")], vec![(0, s("x"), 2)]).unwrap();
        let p = g.permuted(&[2, 0, 1]);
        assert_eq!(p.node_text(2), "a");
        assert_eq!(p.edges()[0].src, 2);
        assert_eq!(p.edges()[0].dst, 1);
    }
}
