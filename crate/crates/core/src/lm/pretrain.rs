use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::model::{LmConfig, TinyDecoderLM};
use super::vocab::{Vocab, ANSWER_SEP};
use crate::data::words::{
    task_words, ATTRIBUTES, CODE_WORDS, STANCE_COUNTER, STANCE_SUPPORT,
};
use crate::data::{generate, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Bound, Tape, Var};

/// Longest run of filler words opening a pretraining document. Large enough
/// that positions reached by long graph prompts are trained.
const MAX_FILLER: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lm: LmConfig,
    pub max_steps: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Documents held out for perplexity.
    pub heldout: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        PretrainConfig {
            lm: LmConfig::small(vocab_size),
            max_steps: 4000,
            lr: 1e-3,
            eval_every: 250,
            patience: 4,
            heldout: 32,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
    pub steps: usize,
    pub digest: String,
}

/// Share of pretraining documents that open with their answer.
const HINT_RATE: f64 = 0.8;

/// Share of documents without graph text. Short documents teach the lookup
/// of the leading answer quickly; long ones make it survive a full prompt.
const SHORT_RATE: f64 = 0.5;

/// Words that can be answers. Filler never uses them, so a hinted answer is
/// the only candidate of its type in the opening run.
fn answer_words() -> HashSet<&'static str> {
    ATTRIBUTES
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .chain(CODE_WORDS.iter().copied())
        .chain([STANCE_SUPPORT, STANCE_COUNTER])
        .collect()
}

/// Documents in the downstream prompt format. Answers are shuffled within each
/// task, so the graph text never determines them and the model cannot learn to
/// read answers out of it. Most documents instead open with the answer words
/// themselves, followed by a random run of filler; the model learns to take
/// its answer from the leading positions, which is where graph prompt vectors
/// sit downstream.
pub fn build_pretraining_corpus(num_docs: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = answer_words();
    let filler: Vec<String> = task_words()
        .into_iter()
        .filter(|w| !reserved.contains(w.as_str()))
        .collect();
    let tasks = [
        TaskKind::AttributeLookup,
        TaskKind::Multifact,
        TaskKind::Stance,
    ];
    let per_task = num_docs.div_ceil(tasks.len());
    let mut docs = Vec::with_capacity(per_task * tasks.len());
    for (t, &task) in tasks.iter().enumerate() {
        let mut spec = TaskSpec::new(task, per_task, seed.wrapping_mul(31).wrapping_add(t as u64));
        spec.nodes_per_graph = rng.gen_range(2..=4);
        let split = generate(&spec)?;
        let examples: Vec<_> = split.all().collect();
        let mut answers: Vec<&str> = examples.iter().map(|e| e.answer.as_str()).collect();
        answers.shuffle(&mut rng);
        for (e, a) in examples.iter().zip(answers) {
            let mut opening: Vec<&str> = Vec::new();
            if rng.gen_bool(HINT_RATE) {
                opening.extend(a.split_whitespace());
            }
            for _ in 0..rng.gen_range(0..=MAX_FILLER) {
                opening.push(filler[rng.gen_range(0..filler.len())].as_str());
            }
            let graph_text = if rng.gen_bool(SHORT_RATE) {
                String::new()
            } else {
                e.graph.textualize()
            };
            docs.push(format!(
                "{} {graph_text} {} <answer> {a} <eos>",
                opening.join(" "),
                e.query
            ));
        }
    }
    docs.shuffle(&mut rng);
    docs.truncate(num_docs);
    Ok(docs)
}

struct DocLoss {
    /// Mean next-token NLL over the document.
    all: Var,
    /// Mean NLL of the tokens after the answer separator, when present.
    answer: Option<Var>,
    bound: Bound,
}

fn doc_loss(tape: &mut Tape, lm: &TinyDecoderLM, ids: &[usize]) -> Result<Option<DocLoss>> {
    if ids.len() < 2 {
        return Ok(None);
    }
    let ids = &ids[..ids.len().min(lm.config().max_len + 1)];
    let mut b = lm.bind(tape);
    let x = b.embed(tape, &ids[..ids.len() - 1])?;
    let logits = b.forward(tape, x)?;
    let targets = &ids[1..];
    let all = tape.cross_entropy_masked(logits, targets, &vec![true; targets.len()])?;
    let answer_mask: Vec<bool> = ids[..ids.len() - 1]
        .iter()
        .scan(false, |seen, &id| {
            *seen |= id == ANSWER_SEP;
            Some(*seen)
        })
        .collect();
    let answer = if answer_mask.contains(&true) {
        Some(tape.cross_entropy_masked(logits, targets, &answer_mask)?)
    } else {
        None
    };
    Ok(Some(DocLoss {
        all,
        answer,
        bound: b.vars,
    }))
}

/// `exp` of the token-weighted mean next-token NLL.
pub fn perplexity(lm: &TinyDecoderLM, docs: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ids in docs {
        let mut tape = Tape::new();
        if let Some(l) = doc_loss(&mut tape, lm, ids)? {
            let n = ids.len().min(lm.config().max_len + 1) - 1;
            nll += tape.value(l.all).item() * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((nll / count as f64).exp())
}

/// Next-token training with early stopping on held-out perplexity. Each step
/// minimizes the document loss plus the loss of its answer span, so the rare
/// answer tokens are not drowned out by filler. The best weights seen are
/// kept, frozen, and returned.
pub fn pretrain_lm(
    corpus: &[String],
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<(TinyDecoderLM, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.lm.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "LM vocabulary {} does not match tokenizer vocabulary {}",
            cfg.lm.vocab_size,
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lm = TinyDecoderLM::new(cfg.lm.clone(), &mut rng)?;
    let docs: Vec<Vec<usize>> = corpus.iter().map(|d| vocab.tokenize(d)).collect();
    let held = cfg.heldout.min(docs.len() / 2);
    let (heldout, train) = docs.split_at(held);
    let train = if train.is_empty() { heldout } else { train };
    let heldout = if heldout.is_empty() { train } else { heldout };

    let initial = perplexity(&lm, heldout)?;
    let mut best = (initial, lm.store().clone());
    let mut stale = 0;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        lm.store(),
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    while steps < cfg.max_steps {
        if steps % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let ids = &train[order[steps % order.len()]];
        steps += 1;
        let mut tape = Tape::new();
        let Some(l) = doc_loss(&mut tape, &lm, ids)? else {
            continue;
        };
        let loss = match l.answer {
            Some(a) => tape.add(l.all, a)?,
            None => l.all,
        };
        let grads = tape.backward(loss)?;
        let g = lm.store().collect_grads(&l.bound, &grads);
        opt.step(lm.store_mut(), &g)?;
        if cfg.eval_every > 0 && steps % cfg.eval_every == 0 {
            let ppl = perplexity(&lm, heldout)?;
            log::debug!("pretrain step {steps}: held-out perplexity {ppl:.3}");
            if ppl < best.0 {
                best = (ppl, lm.store().clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let final_ppl = perplexity(&lm, heldout)?;
    if final_ppl < best.0 {
        best = (final_ppl, lm.store().clone());
    }
    *lm.store_mut() = best.1;
    lm.freeze();
    let report = PretrainReport {
        initial_perplexity: initial,
        final_perplexity: best.0,
        steps,
        digest: lm.digest(),
    };
    Ok((lm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small_cfg(vocab: &Vocab, steps: usize) -> PretrainConfig {
        let mut cfg = PretrainConfig::new(vocab.len(), 4);
        cfg.lm.d_model = 16;
        cfg.lm.heads = 2;
        cfg.lm.layers = 1;
        cfg.max_steps = steps;
        cfg.eval_every = 20;
        cfg.heldout = 8;
        cfg
    }

    #[test]
    fn corpus_is_deterministic_and_in_vocabulary() {
        let vocab = Vocab::task_default();
        let a = build_pretraining_corpus(30, 2).unwrap();
        assert_eq!(a, build_pretraining_corpus(30, 2).unwrap());
        assert_eq!(a.len(), 30);
        for d in &a {
            assert!(
                !vocab.tokenize(d).contains(&super::super::vocab::UNK),
                "{d}"
            );
        }
    }

    #[test]
    fn pretraining_lowers_perplexity_and_freezes() {
        let vocab = Vocab::task_default();
        let corpus = build_pretraining_corpus(60, 1).unwrap();
        let cfg = small_cfg(&vocab, 80);
        let (lm, report) = pretrain_lm(&corpus, &vocab, &cfg).unwrap();
        assert!(report.final_perplexity < report.initial_perplexity);
        assert!(lm.is_frozen());
        assert_eq!(report.digest, lm.digest());

        let (again, _) = pretrain_lm(&corpus, &vocab, &cfg).unwrap();
        assert_eq!(again.digest(), lm.digest());

        let mut store = lm.store().clone();
        let grads: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        assert!(matches!(
            opt.step(&mut store, &grads),
            Err(Error::Frozen(_))
        ));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let vocab = Vocab::task_default();
        assert!(pretrain_lm(&[], &vocab, &small_cfg(&vocab, 1)).is_err());
    }
}
