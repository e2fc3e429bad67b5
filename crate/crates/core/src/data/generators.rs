//! Seeded synthetic QA task families over text-attributed graphs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSplit, QAExample, DEFAULT_SPLIT_RATIO};
use super::graph::TextAttributedGraph;
use super::words::{
    part_relation, relation_for_kind, ATTRIBUTES, CODE_WORDS, CONCEPTS, COUNTER_RELATIONS, NAMES,
    STANCE_COUNTER, STANCE_SUPPORT, SUPPORT_RELATIONS,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AttributeLookup,
    Multifact,
    Stance,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::AttributeLookup => "attribute_lookup",
            TaskKind::Multifact => "multifact",
            TaskKind::Stance => "stance",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "attribute_lookup" | "attribute" => Ok(TaskKind::AttributeLookup),
            "multifact" => Ok(TaskKind::Multifact),
            "stance" => Ok(TaskKind::Stance),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

pub const MAX_MULTIFACT_K: usize = 8;
const MULTIFACT_ENTITIES: usize = 2;
const STANCE_CONCEPTS: usize = 5;
const STANCE_EDGES: usize = 4;

/// Builds a graph from nodes listed in construction order after shuffling
/// node ids, so position in the node list carries no signal.
struct GraphBuilder {
    texts: Vec<String>,
    edges: Vec<(usize, String, usize)>,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder {
            texts: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// Returns the node with this text, creating it when absent.
    fn node(&mut self, text: &str) -> usize {
        match self.texts.iter().position(|t| t == text) {
            Some(i) => i,
            None => {
                self.texts.push(text.to_string());
                self.texts.len() - 1
            }
        }
    }

    fn edge(&mut self, src: usize, text: String, dst: usize) {
        self.edges.push((src, text, dst));
    }

    fn finish(self, rng: &mut impl Rng) -> TextAttributedGraph {
        let mut perm: Vec<usize> = (0..self.texts.len()).collect();
        perm.shuffle(rng);
        let mut edges = self.edges;
        edges.shuffle(rng);
        let g = TextAttributedGraph::new(self.texts, edges).expect("generator builds valid graphs");
        g.permuted(&perm)
    }
}

fn example_id(task: TaskKind, seed: u64, i: usize) -> String {
    format!("{}-{seed}-{i:05}", task.name())
}

/// Entities linked to attribute value nodes by `has_<kind>` edges; the query
/// asks for one attribute of one entity.
pub fn gen_attribute_lookup_task(
    num_examples: usize,
    nodes_per_graph: usize,
    num_attributes: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if nodes_per_graph < 2 || nodes_per_graph > NAMES.len() {
        return Err(Error::Config(format!(
            "nodes_per_graph must be in 2..={}, got {nodes_per_graph}",
            NAMES.len()
        )));
    }
    if num_attributes < 2 || num_attributes > ATTRIBUTES.len() {
        return Err(Error::Config(format!(
            "num_attributes must be in 2..={}, got {num_attributes}",
            ATTRIBUTES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let names: Vec<&str> = NAMES
            .choose_multiple(&mut rng, nodes_per_graph)
            .copied()
            .collect();
        let mut b = GraphBuilder::new();
        let mut facts = Vec::new();
        for name in &names {
            let ent = b.node(name);
            for (kind, values) in &ATTRIBUTES[..num_attributes] {
                let value = values[rng.gen_range(0..values.len())];
                let v = b.node(value);
                b.edge(ent, relation_for_kind(kind), v);
                facts.push((*name, *kind, value));
            }
        }
        let (name, kind, value) = facts[rng.gen_range(0..facts.len())];
        examples.push(QAExample {
            id: example_id(TaskKind::AttributeLookup, seed, i),
            query: format!("what is the {kind} of {name}"),
            answer: value.to_string(),
            graph: b.finish(&mut rng),
        });
    }
    DatasetSplit::from_examples(examples, DEFAULT_SPLIT_RATIO)
}

/// Each entity owns a `k`-word code spread over `part_1..part_k` edges; the
/// answer is the queried entity's code in slot order.
pub fn gen_multifact_task(num_examples: usize, k: usize, seed: u64) -> Result<DatasetSplit> {
    if !(2..=MAX_MULTIFACT_K).contains(&k) {
        return Err(Error::Config(format!(
            "facts per answer must be in 2..={MAX_MULTIFACT_K}, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let names: Vec<&str> = NAMES
            .choose_multiple(&mut rng, MULTIFACT_ENTITIES)
            .copied()
            .collect();
        let mut b = GraphBuilder::new();
        let mut codes = Vec::new();
        for name in &names {
            let ent = b.node(name);
            let mut code = Vec::with_capacity(k);
            for slot in 0..k {
                let word = CODE_WORDS[rng.gen_range(0..CODE_WORDS.len())];
                let w = b.node(word);
                b.edge(ent, part_relation(slot), w);
                code.push(word);
            }
            codes.push(code);
        }
        let pick = rng.gen_range(0..names.len());
        examples.push(QAExample {
            id: example_id(TaskKind::Multifact, seed, i),
            query: format!("what is the code of {}", names[pick]),
            answer: codes[pick].join(" "),
            graph: b.finish(&mut rng),
        });
    }
    DatasetSplit::from_examples(examples, DEFAULT_SPLIT_RATIO)
}

/// Concept graphs with polarized relations; the query asks whether one linked
/// concept supports another. Labels alternate so the classes are balanced.
pub fn gen_stance_task(num_examples: usize, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let concepts: Vec<&str> = CONCEPTS
            .choose_multiple(&mut rng, STANCE_CONCEPTS)
            .copied()
            .collect();
        let mut b = GraphBuilder::new();
        for c in &concepts {
            b.node(c);
        }
        let mut pairs = Vec::new();
        while pairs.len() < STANCE_EDGES {
            let s = rng.gen_range(0..concepts.len());
            let d = rng.gen_range(0..concepts.len());
            if s != d && !pairs.contains(&(s, d)) && !pairs.contains(&(d, s)) {
                pairs.push((s, d));
            }
        }
        let label_support = i % 2 == 0;
        let target = rng.gen_range(0..pairs.len());
        for (e, &(s, d)) in pairs.iter().enumerate() {
            let positive = if e == target {
                label_support
            } else {
                rng.gen_bool(0.5)
            };
            let pool = if positive {
                SUPPORT_RELATIONS
            } else {
                COUNTER_RELATIONS
            };
            b.edge(s, pool[rng.gen_range(0..pool.len())].to_string(), d);
        }
        let (s, d) = pairs[target];
        examples.push(QAExample {
            id: example_id(TaskKind::Stance, seed, i),
            query: format!("does {} support {}", concepts[s], concepts[d]),
            answer: if label_support {
                STANCE_SUPPORT
            } else {
                STANCE_COUNTER
            }
            .to_string(),
            graph: b.finish(&mut rng),
        });
    }
    DatasetSplit::from_examples(examples, DEFAULT_SPLIT_RATIO)
}

/// Parameters accepted by [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub num_examples: usize,
    pub nodes_per_graph: usize,
    pub num_attributes: usize,
    pub facts_per_answer: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: TaskKind, num_examples: usize, seed: u64) -> Self {
        TaskSpec {
            task,
            num_examples,
            nodes_per_graph: 3,
            num_attributes: 2,
            facts_per_answer: 4,
            seed,
        }
    }
}

pub fn generate(spec: &TaskSpec) -> Result<DatasetSplit> {
    match spec.task {
        TaskKind::AttributeLookup => gen_attribute_lookup_task(
            spec.num_examples,
            spec.nodes_per_graph,
            spec.num_attributes,
            spec.seed,
        ),
        TaskKind::Multifact => {
            gen_multifact_task(spec.num_examples, spec.facts_per_answer, spec.seed)
        }
        TaskKind::Stance => gen_stance_task(spec.num_examples, spec.seed),
    }
}
