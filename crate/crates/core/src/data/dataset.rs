use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::TextAttributedGraph;
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QAExample {
    pub id: String,
    pub query: String,
    pub answer: String,
    pub graph: TextAttributedGraph,
}

pub const DEFAULT_SPLIT_RATIO: [usize; 3] = [6, 2, 2];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<QAExample>,
    pub validation: Vec<QAExample>,
    pub test: Vec<QAExample>,
    pub ratio: [usize; 3],
}

impl DatasetSplit {
    /// Splits in order: the first `⌊n·r₀/Σr⌋` examples train, the next
    /// `⌊n·r₁/Σr⌋` validate, the rest test.
    pub fn from_examples(examples: Vec<QAExample>, ratio: [usize; 3]) -> Result<Self> {
        let total: usize = ratio.iter().sum();
        if total == 0 {
            return Err(Error::Config("split ratio sums to zero".into()));
        }
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::InvalidExample {
                    id: ex.id.clone(),
                    reason: "duplicate example id".into(),
                });
            }
        }
        let n = examples.len();
        let n_train = n * ratio[0] / total;
        let n_val = n * ratio[1] / total;
        let mut rest = examples;
        let test = rest.split_off(n_train + n_val);
        let validation = rest.split_off(n_train);
        Ok(DatasetSplit {
            train: rest,
            validation,
            test,
            ratio,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All examples in train, validation, test order.
    pub fn all(&self) -> impl Iterator<Item = &QAExample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in self.all() {
            out.push_str(&serde_json::to_string(&RawExample::from(ex)).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: i64,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    src: i64,
    dst: i64,
    text: String,
}

/// One JSONL line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    id: String,
    query: String,
    answer: String,
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
}

impl From<&QAExample> for RawExample {
    fn from(ex: &QAExample) -> Self {
        RawExample {
            id: ex.id.clone(),
            query: ex.query.clone(),
            answer: ex.answer.clone(),
            nodes: ex
                .graph
                .nodes()
                .iter()
                .map(|n| RawNode {
                    id: n.id as i64,
                    text: n.text.clone(),
                })
                .collect(),
            edges: ex
                .graph
                .edges()
                .iter()
                .map(|e| RawEdge {
                    src: e.src as i64,
                    dst: e.dst as i64,
                    text: e.text.clone(),
                })
                .collect(),
        }
    }
}

impl RawExample {
    fn validate(self) -> Result<QAExample> {
        let id = self.id;
        let invalid = |reason: String| Error::InvalidExample {
            id: id.clone(),
            reason,
        };
        if self.answer.split_whitespace().next().is_none() {
            return Err(invalid("answer is empty".into()));
        }
        let graph = TextAttributedGraph::from_raw(
            self.nodes.into_iter().map(|n| (n.id, n.text)).collect(),
            self.edges
                .into_iter()
                .map(|e| (e.src, e.dst, e.text))
                .collect(),
        )
        .map_err(|d| invalid(d.to_string()))?;
        Ok(QAExample {
            id,
            query: self.query,
            answer: self.answer,
            graph,
        })
    }
}

pub fn parse_jsonl(text: &str, ratio: [usize; 3]) -> Result<DatasetSplit> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        examples.push(raw.validate()?);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    DatasetSplit::from_examples(examples, ratio)
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    load_dataset_with_ratio(path, DEFAULT_SPLIT_RATIO)
}

pub fn load_dataset_with_ratio(path: &Path, ratio: [usize; 3]) -> Result<DatasetSplit> {
    parse_jsonl(&fs::read_to_string(path)?, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, nodes: &str, edges: &str) -> String {
        format!(r#"{{"id":"{id}","query":"q","answer":"a","nodes":{nodes},"edges":{edges}}}"#)
    }

    fn valid(id: usize) -> String {
        line(
            &format!("ex{id}"),
            r#"[{"id":0,"text":"dog"},{"id":1,"text":"cat"}]"#,
            r#"[{"src":0,"dst":1,"text":"chases"}]"#,
        )
    }

    #[test]
    fn ten_lines_split_six_two_two() {
        let text: String = (0..10).map(|i| valid(i) + "\n").collect();
        let split = parse_jsonl(&text, DEFAULT_SPLIT_RATIO).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (6, 2, 2)
        );
    }

    #[test]
    fn dangling_edge_names_example() {
        let bad = line(
            "broken",
            r#"[{"id":0,"text":"a"},{"id":1,"text":"b"},{"id":2,"text":"c"}]"#,
            r#"[{"src":0,"dst":7,"text":"r"}]"#,
        );
        let err = parse_jsonl(&bad, DEFAULT_SPLIT_RATIO).unwrap_err();
        assert!(
            matches!(err, Error::InvalidExample { ref id, .. } if id == "broken"),
            "{err}"
        );
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            parse_jsonl("", DEFAULT_SPLIT_RATIO),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            parse_jsonl("\n\n", DEFAULT_SPLIT_RATIO),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", valid(0));
        let err = parse_jsonl(&text, DEFAULT_SPLIT_RATIO).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{}\n{}\n", valid(3), valid(3));
        assert!(matches!(
            parse_jsonl(&text, DEFAULT_SPLIT_RATIO),
            Err(Error::InvalidExample { .. })
        ));
    }
}
