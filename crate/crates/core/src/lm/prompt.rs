use std::ops::Range;

use super::model::{BoundLm, TinyDecoderLM};
use super::vocab::{Vocab, ANSWER_SEP, EOS, PAD};
use crate::error::{Error, Result};
use crate::pooling::PromptVectors;
use crate::tensor::{Tape, Tensor, Var};

/// Section offsets of an assembled prompt, in row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpans {
    pub graph: Range<usize>,
    pub text: Range<usize>,
    pub query: Range<usize>,
    /// Separator row; present only when an answer is attached.
    pub separator: Option<usize>,
    pub answer: Range<usize>,
}

impl PromptSpans {
    /// Rows before the separator.
    pub fn context_len(&self) -> usize {
        self.query.end
    }

    pub fn len(&self) -> usize {
        self.answer.end.max(self.query.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[E_S; E_text; WE(q)]`, plus `[ANSWER_SEP; WE(a)]` in training mode.
#[derive(Clone, Debug)]
pub struct SoftPrompt {
    pub rows: Var,
    pub spans: PromptSpans,
    pub answer_ids: Vec<usize>,
    pub answer_mask: Vec<bool>,
}

impl SoftPrompt {
    pub fn has_answer(&self) -> bool {
        self.spans.separator.is_some()
    }
}

/// Builds the embedding sequence. Token rows come from the LM's embedding
/// table; the graph rows are taken as given so gradients reach the encoder.
pub fn assemble_prompt(
    tape: &mut Tape,
    lm: &BoundLm<'_>,
    vocab: &Vocab,
    prompt: Option<&PromptVectors>,
    graph_text: &str,
    query: &str,
    answer: Option<&str>,
) -> Result<SoftPrompt> {
    let d = lm.d_model();
    let n = match prompt {
        Some(p) => {
            let shape = tape.shape(p.rows).to_vec();
            if shape[1] != d {
                return Err(Error::Config(format!(
                    "prompt vectors have width {}, LM expects {d}",
                    shape[1]
                )));
            }
            shape[0]
        }
        None => 0,
    };
    let text_ids = vocab.tokenize(graph_text);
    let query_ids = vocab.tokenize(query);
    let answer_ids = answer.map(|a| vocab.tokenize(a));
    let answer_len = answer_ids.as_ref().map_or(0, |a| 1 + a.len());
    let total = n + text_ids.len() + query_ids.len() + answer_len;
    let max = lm.lm.config().max_len;
    if total > max {
        return Err(Error::PromptOverflow {
            total,
            max,
            graph: n,
            text: text_ids.len(),
            query: query_ids.len(),
            answer: answer_len,
        });
    }

    let mut ids = text_ids.clone();
    ids.extend(&query_ids);
    if let Some(a) = &answer_ids {
        ids.push(ANSWER_SEP);
        ids.extend(a);
    }
    let mut parts = Vec::new();
    if let Some(p) = prompt {
        parts.push(p.rows);
    }
    if !ids.is_empty() {
        parts.push(lm.embed(tape, &ids)?);
    }
    let rows = if parts.is_empty() {
        tape.constant(Tensor::zeros(&[0, d]))
    } else {
        tape.concat_rows(&parts)?
    };

    let text = n..n + text_ids.len();
    let query_span = text.end..text.end + query_ids.len();
    let (separator, answer_span) = match &answer_ids {
        Some(a) => (
            Some(query_span.end),
            query_span.end + 1..query_span.end + 1 + a.len(),
        ),
        None => (None, query_span.end..query_span.end),
    };
    let mut answer_mask = vec![false; total];
    for t in answer_span.clone() {
        answer_mask[t] = true;
    }
    Ok(SoftPrompt {
        rows,
        spans: PromptSpans {
            graph: 0..n,
            text,
            query: query_span,
            separator,
            answer: answer_span,
        },
        answer_ids: answer_ids.unwrap_or_default(),
        answer_mask,
    })
}

/// Next-token logits at every prompt position.
pub fn lm_forward(tape: &mut Tape, lm: &mut BoundLm<'_>, sp: &SoftPrompt) -> Result<Var> {
    lm.forward(tape, sp.rows)
}

/// Mean cross-entropy of the answer tokens and the closing EOS, each
/// predicted from the row before it.
pub fn answer_loss(tape: &mut Tape, logits: Var, sp: &SoftPrompt) -> Result<Var> {
    let sep = sp
        .spans
        .separator
        .ok_or_else(|| Error::Contract("answer loss needs a prompt with an answer".into()))?;
    let t_len = tape.shape(logits)[0];
    let mut targets = vec![PAD; t_len];
    let mut mask = vec![false; t_len];
    for (k, &id) in sp.answer_ids.iter().enumerate() {
        targets[sep + k] = id;
        mask[sep + k] = true;
    }
    let last = sep + sp.answer_ids.len();
    targets[last] = EOS;
    mask[last] = true;
    tape.cross_entropy_masked(logits, &targets, &mask)
}

/// Argmax continuation after the separator until EOS, `max_len` tokens, or
/// the LM context is full. Returns the space-joined tokens.
pub fn greedy_decode(
    lm: &TinyDecoderLM,
    vocab: &Vocab,
    context: &Tensor,
    max_len: usize,
) -> Result<String> {
    let mut out: Vec<usize> = Vec::new();
    let limit = lm.config().max_len;
    while out.len() < max_len && context.rows() + 1 + out.len() <= limit {
        let mut tape = Tape::new();
        let mut b = lm.bind(&mut tape);
        let ctx = tape.constant(context.clone());
        let mut ids = vec![ANSWER_SEP];
        ids.extend(&out);
        let tail = b.embed(&mut tape, &ids)?;
        let x = tape.concat_rows(&[ctx, tail])?;
        let logits = b.forward(&mut tape, x)?;
        let v = tape.value(logits);
        let row = v.row_slice(v.rows() - 1);
        let next = argmax(row);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(vocab.detokenize(&out))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
