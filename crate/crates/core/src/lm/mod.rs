//! Stand-in frozen language model: tokenizer, a small causal decoder, soft
//! prompt assembly, the answer loss and greedy decoding.

pub mod checkpoint;
mod model;
mod pretrain;
mod prompt;
mod vocab;

pub use model::{BoundLm, LmConfig, TinyDecoderLM};
pub use pretrain::{
    build_pretraining_corpus, perplexity, pretrain_lm, PretrainConfig, PretrainReport,
};
pub use prompt::{
    answer_loss, assemble_prompt, greedy_decode, lm_forward, PromptSpans, SoftPrompt,
};
pub use vocab::{Vocab, ANSWER_SEP, BOS, EOS, PAD, RESERVED, UNK};
