//! Word lists shared by the task generators, the LM pretraining corpus and the
//! default vocabulary.

pub const NAMES: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory",
    "niaj", "olivia", "peggy", "rupert", "sybil",
];

/// `(kind, values)`; the relation text is `has_<kind>`.
pub const ATTRIBUTES: &[(&str, &[&str])] = &[
    (
        "color",
        &[
            "red", "green", "blue", "yellow", "purple", "orange", "black", "white",
        ],
    ),
    (
        "shape",
        &[
            "cube", "sphere", "cylinder", "cone", "pyramid", "torus", "disk", "ring",
        ],
    ),
    (
        "size",
        &[
            "tiny", "small", "little", "medium", "big", "large", "huge", "giant",
        ],
    ),
    (
        "material",
        &[
            "metal", "rubber", "wood", "glass", "stone", "paper", "cloth", "plastic",
        ],
    ),
];

pub const CODE_WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

pub const CONCEPTS: &[&str] = &[
    "exercise",
    "health",
    "smoking",
    "cancer",
    "study",
    "grades",
    "rain",
    "flood",
    "sleep",
    "energy",
    "sugar",
    "obesity",
    "reading",
    "knowledge",
    "pollution",
    "disease",
];

pub const SUPPORT_RELATIONS: &[&str] = &["causes", "enables", "implies", "improves"];
pub const COUNTER_RELATIONS: &[&str] = &["prevents", "opposes", "refutes", "reduces"];

pub const STANCE_SUPPORT: &str = "support";
pub const STANCE_COUNTER: &str = "counter";

pub const TEMPLATE_WORDS: &[&str] = &[
    "what", "is", "the", "of", "does", "code", "has", "a", "and", "part", "with", "answer", ",",
    "?", ".", ":",
];

/// Largest node id written by the textualization template that the default
/// vocabulary covers.
pub const MAX_NODE_ID_TOKEN: usize = 63;

pub fn relation_for_kind(kind: &str) -> String {
    format!("has_{kind}")
}

pub fn part_relation(slot: usize) -> String {
    format!("part_{}", slot + 1)
}

/// Every word the generators can emit, deduplicated in a fixed order.
pub fn task_words() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |w: String| {
        if !out.contains(&w) {
            out.push(w);
        }
    };
    for w in TEMPLATE_WORDS {
        push(w.to_string());
    }
    for i in 0..=MAX_NODE_ID_TOKEN {
        push(i.to_string());
    }
    for w in NAMES {
        push(w.to_string());
    }
    for (kind, values) in ATTRIBUTES {
        push(kind.to_string());
        push(relation_for_kind(kind));
        for v in *values {
            push(v.to_string());
        }
    }
    for slot in 0..8 {
        push(part_relation(slot));
    }
    for w in CODE_WORDS.iter().chain(CONCEPTS) {
        push(w.to_string());
    }
    for w in SUPPORT_RELATIONS.iter().chain(COUNTER_RELATIONS) {
        push(w.to_string());
    }
    push(STANCE_SUPPORT.to_string());
    push(STANCE_COUNTER.to_string());
    out
}
