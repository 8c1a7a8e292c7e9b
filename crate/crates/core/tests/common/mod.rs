#![allow(dead_code)]

pub mod invariants;
pub mod oracles;

use mpfn::data::{synthetic_corpus, SyntheticConfig};
use mpfn::model::ModelConfig;
use mpfn::pipeline::{prepare, Prepared, ResourceSet, SYNTH_VECTOR_SCALE, SYNTH_VOCAB};

/// A model small enough to train in a few seconds.
pub fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.dims.word = 16;
    cfg.dims.pos = 4;
    cfg.dims.ner = 4;
    cfg.dims.rel = 4;
    cfg.dims.attn = 8;
    cfg.hidden = 8;
    cfg.fusion.fnn_hidden = 8;
    cfg
}

pub fn synthetic(sizes: [usize; 3], word_dim: usize, seed: u64) -> Prepared {
    let corpus = synthetic_corpus(sizes, SYNTH_VOCAB, seed, SyntheticConfig::default()).unwrap();
    let resources = ResourceSet {
        random_scale: SYNTH_VECTOR_SCALE,
        ..ResourceSet::default()
    };
    prepare(&corpus, &resources, word_dim, seed).unwrap()
}
