//! Text-attributed graphs, the JSONL dataset format, the hashed text encoder
//! and the synthetic task generators.

mod dataset;
mod generators;
mod graph;
pub mod oracle;
mod textenc;
pub mod words;

pub use dataset::{
    load_dataset, load_dataset_with_ratio, parse_jsonl, DatasetSplit, QAExample,
    DEFAULT_SPLIT_RATIO,
};
pub use generators::{
    gen_attribute_lookup_task, gen_multifact_task, gen_stance_task, generate, TaskKind, TaskSpec,
    MAX_MULTIFACT_K,
};
pub use graph::{Edge, GraphDefect, Node, TextAttributedGraph};
pub use textenc::{cosine, text_encode, MIN_TEXT_DIM};
