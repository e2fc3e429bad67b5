use std::collections::{BTreeMap, HashMap};

use crate::data::words::task_words;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const ANSWER_SEP: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<answer>"];

/// Token ↔ id map. Ids `0..5` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.insert(r);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && !v.index.contains_key(&w) {
                v.insert(&w);
            }
        }
        v
    }

    /// Every word the synthetic task generators can produce.
    pub fn task_default() -> Self {
        Vocab::from_words(task_words())
    }

    fn insert(&mut self, w: &str) {
        self.index.insert(w.to_string(), self.tokens.len());
        self.tokens.push(w.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// Lowercases, splits on whitespace, and separates punctuation into
    /// single-character tokens. Letters, digits and `_` form words. Reserved
    /// literals such as `<answer>` map to their ids; anything unknown is UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined tokens; inverse of [`Vocab::tokenize`] on in-vocabulary ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (t, &i) in &map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| Error::Checkpoint(format!("vocab id {i} out of range")))?;
            *slot = Some(t.clone());
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Checkpoint(format!("vocab id {i} missing"))))
            .collect::<Result<_>>()?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(r) {
                return Err(Error::Checkpoint(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Vocab { tokens, index: map })
    }
}

fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = lower.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '<' {
            if let Some(r) = RESERVED.iter().find(|r| lower[i..].starts_with(*r)) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(r.to_string());
                for _ in 1..r.chars().count() {
                    chars.next();
                }
                continue;
            }
        }
        if c.is_alphanumeric() || c == '_' {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
