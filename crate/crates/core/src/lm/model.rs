use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn small(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "LM width {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.layers == 0 {
            return Err(Error::Config("LM sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
}

/// Pre-norm causal decoder with learned positions and an output head tied to
/// the token embedding.
#[derive(Clone, Debug)]
pub struct TinyDecoderLM {
    config: LmConfig,
    store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// A model bound to one tape.
pub struct BoundLm<'a> {
    pub lm: &'a TinyDecoderLM,
    pub vars: Bound,
    embed_t: Option<Var>,
}

impl TinyDecoderLM {
    pub fn new<R: Rng>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut s = ParamStore::new();
        let g = "lm";
        let embed = s.add_normal("lm.embed", g, config.vocab_size, d, INIT_STD, rng);
        let pos = s.add_normal("lm.pos", g, config.max_len, d, INIT_STD, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("lm.{l}.{n}");
            let ln1_g = s.add(p("ln1.g"), g, Tensor::full(&[1, d], 1.0));
            let ln1_b = s.add(p("ln1.b"), g, Tensor::zeros(&[1, d]));
            let w_q = s.add_uniform(p("w_q"), g, d, d, rng);
            let w_k = s.add_uniform(p("w_k"), g, d, d, rng);
            let w_v = s.add_uniform(p("w_v"), g, d, d, rng);
            let w_o = s.add_uniform(p("w_o"), g, d, d, rng);
            let ln2_g = s.add(p("ln2.g"), g, Tensor::full(&[1, d], 1.0));
            let ln2_b = s.add(p("ln2.b"), g, Tensor::zeros(&[1, d]));
            let w_ff1 = s.add_uniform(p("w_ff1"), g, d, 4 * d, rng);
            let b_ff1 = s.add(p("b_ff1"), g, Tensor::zeros(&[1, 4 * d]));
            let w_ff2 = s.add_uniform(p("w_ff2"), g, 4 * d, d, rng);
            let b_ff2 = s.add(p("b_ff2"), g, Tensor::zeros(&[1, d]));
            blocks.push(Block {
                ln1_g,
                ln1_b,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_g,
                ln2_b,
                w_ff1,
                b_ff1,
                w_ff2,
                b_ff2,
            });
        }
        let lnf_g = s.add("lm.lnf.g", g, Tensor::full(&[1, d], 1.0));
        let lnf_b = s.add("lm.lnf.b", g, Tensor::zeros(&[1, d]));
        Ok(TinyDecoderLM {
            config,
            store: s,
            embed,
            pos,
            blocks,
            lnf_g,
            lnf_b,
        })
    }

    /// Rebuilds a model from a store laid out by [`TinyDecoderLM::new`].
    pub fn from_store(config: LmConfig, store: ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = TinyDecoderLM::new(config, &mut rng)?;
        if store.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} LM tensors, found {}",
                m.store.len(),
                store.len()
            )));
        }
        for ((_, a), (_, b)) in m.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "LM tensor {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        m.store = store;
        Ok(m)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLm<'_> {
        BoundLm {
            lm: self,
            vars: self.store.bind(tape),
            embed_t: None,
        }
    }
}

impl BoundLm<'_> {
    pub fn d_model(&self) -> usize {
        self.lm.config.d_model
    }

    /// Token embedding rows for `ids`.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(self.vars[self.lm.embed], ids)
    }

    /// `T×d` input rows to `T×V` next-token logits.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cfg = &self.lm.config;
        let t_len = tape.shape(x)[0];
        if t_len > cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {t_len} exceeds LM context {}",
                cfg.max_len
            )));
        }
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let pos = tape.slice_rows(self.vars[self.lm.pos], 0, t_len)?;
        let mut h = tape.add(x, pos)?;
        for b in &self.lm.blocks {
            let v = &self.vars;
            let a = tape.layer_norm(h, v[b.ln1_g], v[b.ln1_b])?;
            let q = tape.matmul(a, v[b.w_q])?;
            let k = tape.matmul(a, v[b.w_k])?;
            let val = tape.matmul(a, v[b.w_v])?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(val, hd * dh, dh)?;
                let kt = tape.transpose(kh);
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, inv);
                let p = tape.causal_softmax_rows(s);
                heads.push(tape.matmul(p, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = tape.matmul(cat, v[b.w_o])?;
            h = tape.add(h, o)?;
            let f = tape.layer_norm(h, v[b.ln2_g], v[b.ln2_b])?;
            let f = tape.matmul(f, v[b.w_ff1])?;
            let f = tape.add_row(f, v[b.b_ff1])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, v[b.w_ff2])?;
            let f = tape.add_row(f, v[b.b_ff2])?;
            h = tape.add(h, f)?;
        }
        let h = tape.layer_norm(h, self.vars[self.lm.lnf_g], self.vars[self.lm.lnf_b])?;
        let et = match self.embed_t {
            Some(e) => e,
            None => {
                let e = tape.transpose(self.vars[self.lm.embed]);
                self.embed_t = Some(e);
                e
            }
        };
        tape.matmul(h, et)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyDecoderLM {
        let cfg = LmConfig {
            vocab_size: 11,
            d_model: 8,
            layers: 2,
            heads: 2,
            max_len: 16,
        };
        TinyDecoderLM::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn causal_prefix_logits_do_not_see_the_future() {
        let lm = tiny();
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let mut b = lm.bind(&mut tape);
            let x = b.embed(&mut tape, ids).unwrap();
            let y = b.forward(&mut tape, x).unwrap();
            tape.value(y).clone()
        };
        let a = run(&[1, 5, 6, 7, 2]);
        let b = run(&[1, 5, 6, 9, 3]);
        for t in 0..3 {
            assert_eq!(a.row_slice(t), b.row_slice(t));
        }
        assert_ne!(a.row_slice(3), b.row_slice(3));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let lm = tiny();
        let mut tape = Tape::new();
        let mut b = lm.bind(&mut tape);
        let x = b.embed(&mut tape, &[1; 17]).unwrap();
        assert!(b.forward(&mut tape, x).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = LmConfig::small(10);
        cfg.heads = 5;
        assert!(TinyDecoderLM::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn store_round_trip_rebuilds_same_model() {
        let lm = tiny();
        let again = TinyDecoderLM::from_store(lm.config().clone(), lm.store().clone()).unwrap();
        assert_eq!(again.digest(), lm.digest());
    }
}
