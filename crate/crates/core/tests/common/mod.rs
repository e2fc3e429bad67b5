use std::path::PathBuf;
use std::sync::OnceLock;

use lgpt_core::lm::{build_pretraining_corpus, checkpoint, pretrain_lm, PretrainConfig};
use lgpt_core::lm::{TinyDecoderLM, Vocab};

pub const LM_SEED: u64 = 7;
pub const LM_DOCS: usize = 4000;

/// Path of the LM shared by every test target in the workspace.
pub fn lm_path() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("lgpt_lm_seed{LM_SEED}.bin"))
}

/// The default pretrained LM, built on first use and cached on disk.
pub fn pretrained_lm() -> &'static (TinyDecoderLM, Vocab) {
    static LM: OnceLock<(TinyDecoderLM, Vocab)> = OnceLock::new();
    LM.get_or_init(|| {
        let path = lm_path();
        if let Ok(loaded) = checkpoint::load(&path) {
            return loaded;
        }
        let vocab = Vocab::task_default();
        let cfg = PretrainConfig::new(vocab.len(), LM_SEED);
        let corpus = build_pretraining_corpus(LM_DOCS, LM_SEED).unwrap();
        let (lm, _) = pretrain_lm(&corpus, &vocab, &cfg).unwrap();
        checkpoint::save(&lm, &vocab, &path).unwrap();
        (lm, vocab)
    })
}
