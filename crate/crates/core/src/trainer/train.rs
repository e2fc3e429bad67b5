use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::{GraphPromptModel, Prepared};
use crate::data::{DatasetSplit, QAExample};
use crate::error::{Error, Result};
use crate::lm::{TinyDecoderLM, Vocab};
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub trajectory: Vec<EvalPoint>,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_metric: f64,
    /// Exact-match accuracy on the test split under the best-validation parameters.
    pub test_metric: f64,
    pub skipped_examples: usize,
    pub wall_time_secs: f64,
    pub lm_digest_before: String,
    pub lm_digest_after: String,
    pub digests_equal: bool,
    /// Digest of the selected encoder parameters.
    pub params_digest: String,
}

/// Result of [`train`]: the report plus the selected parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: GraphPromptModel,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match after whitespace and case normalization.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    normalize(predicted) == normalize(gold)
}

/// Fraction of `(predicted, gold)` pairs that match; 0 for an empty set.
pub fn exact_match_accuracy<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pairs {
        total += 1;
        hit += answers_match(p, g) as usize;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Greedy-decoded exact-match accuracy. Examples whose prompt does not fit
/// the LM count as wrong.
pub fn evaluate(
    model: &GraphPromptModel,
    lm: &TinyDecoderLM,
    vocab: &Vocab,
    examples: &[Prepared],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        match model.predict(lm, vocab, ex) {
            Ok(p) => preds.push(p),
            Err(Error::PromptOverflow { .. }) => preds.push(String::new()),
            Err(e) => return Err(e),
        }
    }
    Ok(exact_match_accuracy(
        preds
            .iter()
            .map(String::as_str)
            .zip(examples.iter().map(|e| e.answer.as_str())),
    ))
}

pub fn prepare(examples: &[QAExample], d: usize) -> Result<Vec<Prepared>> {
    examples.iter().map(|e| Prepared::new(e, d)).collect()
}

/// Trains the encoder against the frozen LM with batch size 1, evaluating on
/// validation every `eval_every` steps and at the end. The parameters with the
/// best validation score (earliest on ties) are kept and scored on test.
pub fn train(
    config: &RunConfig,
    data: &DatasetSplit,
    lm: &TinyDecoderLM,
    vocab: &Vocab,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !lm.is_frozen() {
        return Err(Error::Contract("training needs a frozen LM".into()));
    }
    if lm.config().d_model != config.d_llm {
        return Err(Error::Config(format!(
            "config d_llm {} does not match LM width {}",
            config.d_llm,
            lm.config().d_model
        )));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let started = Instant::now();
    let lm_digest_before = lm.digest();
    let train_set = prepare(&data.train, config.d)?;
    let mut val_set = prepare(&data.validation, config.d)?;
    if config.eval_limit > 0 {
        val_set.truncate(config.eval_limit);
    }
    let test_set = prepare(&data.test, config.d)?;

    let mut model = GraphPromptModel::new(config)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            ..AdamWConfig::default()
        },
        model.store(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.max_steps);
    let mut trajectory = Vec::new();
    let mut window = (0.0, 0usize);
    let mut skipped = 0usize;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut consecutive_skips = 0usize;

    let record = |model: &GraphPromptModel,
                      step: usize,
                      window: &mut (f64, usize),
                      trajectory: &mut Vec<EvalPoint>,
                      best: &mut Option<(f64, usize, ParamStore)>|
     -> Result<()> {
        let val = if val_set.is_empty() {
            0.0
        } else {
            evaluate(model, lm, vocab, &val_set)?
        };
        let train_loss = if window.1 == 0 {
            0.0
        } else {
            window.0 / window.1 as f64
        };
        log::info!(
            "{} step {step}: train loss {train_loss:.4}, validation {val:.4}",
            config.arm()
        );
        trajectory.push(EvalPoint {
            step,
            train_loss,
            val_metric: val,
        });
        *window = (0.0, 0);
        if best.as_ref().is_none_or(|b| val > b.0) {
            *best = Some((val, step, model.store().clone()));
        }
        Ok(())
    };

    let mut step = 0;
    while step < config.max_steps {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let ex = &train_set[order[cursor]];
        cursor += 1;
        let mut tape = Tape::new();
        let (loss, bound) = match model.loss(&mut tape, lm, vocab, ex) {
            Ok(v) => v,
            Err(e @ Error::PromptOverflow { .. }) => {
                log::warn!("skipping example: {e}");
                skipped += 1;
                consecutive_skips += 1;
                if consecutive_skips >= train_set.len() {
                    return Err(Error::Config(
                        "no training example fits the LM context".into(),
                    ));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        consecutive_skips = 0;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                step,
                config: serde_json::to_string(config)?,
            });
        }
        let grads = tape.backward(loss)?;
        let g = model.store().collect_grads(&bound, &grads);
        opt.step(model.store_mut(), &g)?;
        losses.push(value);
        window.0 += value;
        window.1 += 1;
        step += 1;
        if config.eval_every > 0 && step % config.eval_every == 0 {
            record(&model, step, &mut window, &mut trajectory, &mut best)?;
        }
    }
    if trajectory.last().is_none_or(|p| p.step != step) {
        record(&model, step, &mut window, &mut trajectory, &mut best)?;
    }

    let (best_val, best_step, params) = best.expect("at least one evaluation");
    *model.store_mut() = params;
    let test_metric = evaluate(&model, lm, vocab, &test_set)?;
    let lm_digest_after = lm.digest();
    let report = RunReport {
        config: config.clone(),
        trajectory,
        losses,
        steps: step,
        best_step,
        best_val_metric: best_val,
        test_metric,
        skipped_examples: skipped,
        wall_time_secs: started.elapsed().as_secs_f64(),
        digests_equal: lm_digest_before == lm_digest_after,
        lm_digest_before,
        lm_digest_after,
        params_digest: model.store().digest(),
    };
    if !report.digests_equal {
        return Err(Error::Contract("frozen LM changed during training".into()));
    }
    Ok(TrainOutcome { report, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_and_case_are_ignored() {
        assert!(answers_match(" Alpha  bravo ", "alpha bravo"));
        assert!(!answers_match("alpha", "alpha bravo"));
        assert!(!answers_match("bravo alpha", "alpha bravo"));
    }

    #[test]
    fn accuracy_bounds() {
        let gold = ["red", "blue", "cube"];
        assert_eq!(exact_match_accuracy(gold.iter().map(|g| (*g, *g))), 1.0);
        assert_eq!(exact_match_accuracy(gold.iter().map(|g| ("zzz", *g))), 0.0);
        assert_eq!(exact_match_accuracy(std::iter::empty()), 0.0);
    }
}
