use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::{GraphPromptModel, Prepared};
use crate::data::{QAExample, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, TinyDecoderLM, Vocab};
use crate::tensor::check::{central_difference, relative_error};
use crate::tensor::{Tape, Tensor};

/// Relative error bound for the full pipeline.
pub const PIPELINE_TOLERANCE: f64 = 1e-5;

/// Coordinates probed per parameter group.
pub const COORDS_PER_GROUP: usize = 5;

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GroupCheck {
    /// The coordinate with the largest error.
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

const TINY_WORDS: [&str; 10] = [
    "0", "1", "2", ",", "alice", "red", "cube", "has_color", "has_shape", "color",
];

fn tiny_example() -> QAExample {
    let graph = TextAttributedGraph::new(
        vec!["alice".into(), "red".into(), "cube".into()],
        vec![(0, "has_color".into(), 1), (0, "has_shape".into(), 2)],
    )
    .expect("valid graph");
    QAExample {
        id: "gradcheck".into(),
        graph,
        query: "color alice".into(),
        answer: "red".into(),
    }
}

/// Shrinks `config` to the tiny instance: width 8, two heads, at most two
/// pooling tokens. Readout, fusion and depths are kept.
pub fn tiny_config(config: &RunConfig) -> RunConfig {
    RunConfig {
        d: 8,
        d_llm: 8,
        heads: 2,
        n_tokens: config.n_tokens.clamp(1, 2),
        ..config.clone()
    }
    .normalized()
}

/// Compares analytic gradients of the end-to-end answer loss with central
/// differences on [`COORDS_PER_GROUP`] random coordinates of every trainable
/// group. The LM is frozen and therefore not checked; groups absent under the
/// configuration do not appear.
pub fn gradient_check_suite(config: &RunConfig) -> Result<Vec<GroupCheck>> {
    let config = tiny_config(config);
    config.validate()?;
    let ex = tiny_example();
    let vocab = Vocab::from_words(TINY_WORDS);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lm = TinyDecoderLM::new(
        LmConfig {
            vocab_size: vocab.len(),
            d_model: config.d_llm,
            layers: 1,
            heads: 2,
            max_len: 48,
        },
        &mut rng,
    )?;
    lm.freeze();
    let prepared = Prepared::new(&ex, config.d)?;
    let model = GraphPromptModel::new(&config)?;

    let loss_of = |model: &GraphPromptModel| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = model.loss(&mut tape, &lm, &vocab, &prepared)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let (loss, bound) = model.loss(&mut tape, &lm, &vocab, &prepared)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = model.store().collect_grads(&bound, &grads);

    let mut report = Vec::new();
    for group in model.store().groups() {
        let ids: Vec<_> = model
            .store()
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect();
        let mut coords = Vec::with_capacity(COORDS_PER_GROUP);
        for _ in 0..COORDS_PER_GROUP {
            let id = ids[rng.gen_range(0..ids.len())];
            let coord = rng.gen_range(0..model.store().value(id).len());
            let mut x = model.store().value(id).clone();
            let numeric = central_difference(&mut x, coord, |x| {
                let mut probe = model.clone();
                *probe.store_mut().value_mut(id) = x.clone();
                loss_of(&probe)
            })?;
            let a = analytic[id.index()].data()[coord];
            coords.push(CoordCheck {
                param: model.store().get(id).name.clone(),
                coord,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
        let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
        report.push(GroupCheck {
            group,
            coords,
            max_rel_err,
            passed: max_rel_err < PIPELINE_TOLERANCE,
        });
    }
    Ok(report)
}

/// Error describing the first failing group, if any.
pub fn first_failure(report: &[GroupCheck]) -> Option<Error> {
    report.iter().find(|g| !g.passed).map(|g| {
        let w = g.worst().expect("groups have coordinates");
        Error::Contract(format!(
            "gradient check failed for group {} at {}[{}]: analytic {:e}, numeric {:e}",
            g.group, w.param, w.coord, w.analytic, w.numeric
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::{Fusion, Readout};

    #[test]
    fn tiny_vocab_covers_the_example() {
        let v = Vocab::from_words(TINY_WORDS);
        assert!(v.len() <= 16, "{}", v.len());
        let ex = tiny_example();
        for text in [ex.graph.textualize(), ex.query, ex.answer] {
            assert!(!v.tokenize(&text).contains(&crate::lm::UNK), "{text}");
        }
    }

    #[test]
    fn every_group_passes_for_all_fusions() {
        for fusion in Fusion::ALL {
            let c = RunConfig {
                fusion,
                ..RunConfig::default()
            };
            let report = gradient_check_suite(&c).unwrap();
            assert!(first_failure(&report).is_none(), "{fusion}: {report:#?}");
            assert!(report.iter().all(|g| g.coords.len() == COORDS_PER_GROUP));
        }
    }

    #[test]
    fn mean_none_omits_absent_groups() {
        let c = RunConfig {
            readout: Readout::Mean,
            fusion: Fusion::None,
            ..RunConfig::default()
        };
        let groups: Vec<String> = gradient_check_suite(&c)
            .unwrap()
            .into_iter()
            .map(|g| g.group)
            .collect();
        assert_eq!(groups, ["gnn_graph", "proj"]);
    }
}
