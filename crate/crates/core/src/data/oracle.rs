//! Symbolic readers that answer the synthetic tasks by walking the graph.
//! They are the data-validity oracles: a well-formed split scores 1.0.

use super::dataset::QAExample;
use super::graph::TextAttributedGraph;
use super::words::{
    part_relation, relation_for_kind, COUNTER_RELATIONS, STANCE_COUNTER, STANCE_SUPPORT,
    SUPPORT_RELATIONS,
};

fn follow<'g>(g: &'g TextAttributedGraph, src: usize, relation: &str) -> Option<&'g str> {
    g.edges()
        .iter()
        .find(|e| e.src == src && e.text == relation)
        .map(|e| g.node_text(e.dst))
}

/// Answers `what is the <kind> of <name>`, `what is the code of <name>` and
/// `does <a> support <b>` queries; `None` when the graph lacks the facts.
pub fn oracle_answer(ex: &QAExample) -> Option<String> {
    let words: Vec<&str> = ex.query.split_whitespace().collect();
    let g = &ex.graph;
    match words.as_slice() {
        ["what", "is", "the", "code", "of", name] => {
            let ent = g.find_node(name)?;
            let mut parts = Vec::new();
            for slot in 0.. {
                match follow(g, ent, &part_relation(slot)) {
                    Some(w) => parts.push(w),
                    None => break,
                }
            }
            (!parts.is_empty()).then(|| parts.join(" "))
        }
        ["what", "is", "the", kind, "of", name] => {
            let ent = g.find_node(name)?;
            follow(g, ent, &relation_for_kind(kind)).map(str::to_string)
        }
        ["does", a, "support", b] => {
            let (s, d) = (g.find_node(a)?, g.find_node(b)?);
            let e = g.edges().iter().find(|e| e.src == s && e.dst == d)?;
            if SUPPORT_RELATIONS.contains(&e.text.as_str()) {
                Some(STANCE_SUPPORT.to_string())
            } else if COUNTER_RELATIONS.contains(&e.text.as_str()) {
                Some(STANCE_COUNTER.to_string())
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Exact-match accuracy of the oracle over `examples`.
pub fn oracle_accuracy<'a>(examples: impl IntoIterator<Item = &'a QAExample>) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for ex in examples {
        total += 1;
        if oracle_answer(ex).as_deref() == Some(ex.answer.as_str()) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
