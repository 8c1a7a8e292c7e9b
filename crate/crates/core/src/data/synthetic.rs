//! Lexical-overlap corpora for smoke tests.
//!
//! Words are `w0 .. w{V-1}`. The passage and question are random words. The
//! correct choice copies a span of 2 or 3 passage words and adds one noise
//! word; the wrong choice has the same length and uses only words absent
//! from passage and question. Labels alternate, so any `n` is balanced to
//! within one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusMeta, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub passage_len: usize,
    pub question_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            passage_len: 10,
            question_len: 3,
        }
    }
}

pub fn generate_synthetic(n: usize, vocab_size: usize, seed: u64) -> Result<Vec<Instance>> {
    generate_with(n, vocab_size, seed, SyntheticConfig::default())
}

pub fn generate_with(
    n: usize,
    vocab_size: usize,
    seed: u64,
    cfg: SyntheticConfig,
) -> Result<Vec<Instance>> {
    if n < 2 {
        return Err(Error::Usage(format!(
            "synthetic corpus needs at least 2 instances, got {n}"
        )));
    }
    if cfg.passage_len < 3 || cfg.question_len == 0 {
        return Err(Error::Usage(
            "synthetic passages need 3+ words and questions 1+".into(),
        ));
    }
    // room for the context plus a full wrong choice and a noise word
    let needed = cfg.passage_len + cfg.question_len + 5;
    if vocab_size < needed {
        return Err(Error::Usage(format!(
            "vocabulary of {vocab_size} is too small for these lengths, need {needed}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |i: usize| format!("w{i}");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let passage: Vec<usize> = (0..cfg.passage_len)
            .map(|_| rng.gen_range(0..vocab_size))
            .collect();
        let question: Vec<usize> = (0..cfg.question_len)
            .map(|_| rng.gen_range(0..vocab_size))
            .collect();
        let mut outside: Vec<usize> = (0..vocab_size)
            .filter(|w| !passage.contains(w) && !question.contains(w))
            .collect();
        outside.shuffle(&mut rng);

        let span = rng.gen_range(2..=3);
        let start = rng.gen_range(0..=cfg.passage_len - span);
        let mut correct: Vec<usize> = passage[start..start + span].to_vec();
        let noise = outside.pop().expect("vocabulary size checked");
        correct.insert(rng.gen_range(0..=correct.len()), noise);
        let wrong: Vec<usize> = (0..correct.len())
            .map(|_| outside[rng.gen_range(0..outside.len())])
            .collect();

        let label = i % 2;
        let mut choices = [wrong, correct];
        if label == 0 {
            choices.swap(0, 1);
        }
        let words = |ids: &[usize]| ids.iter().map(|&w| word(w)).collect::<Vec<_>>();
        out.push(Instance {
            id: format!("syn{seed}_{i}"),
            passage: words(&passage),
            question: words(&question),
            choices: choices.iter().map(|c| words(c)).collect(),
            label: Some(label),
            kind: None,
        });
    }
    Ok(out)
}

/// Train, dev and test splits drawn with distinct derived seeds.
pub fn synthetic_corpus(
    sizes: [usize; 3],
    vocab_size: usize,
    seed: u64,
    cfg: SyntheticConfig,
) -> Result<Corpus> {
    let split = |k: u64, n: usize| {
        if n == 0 {
            Ok(Vec::new())
        } else {
            generate_with(n, vocab_size, seed.wrapping_mul(3).wrapping_add(k), cfg).map(|mut v| {
                let tag = ["train", "dev", "test"][k as usize];
                v.iter_mut()
                    .for_each(|inst| inst.id = format!("{tag}_{}", inst.id));
                v
            })
        }
    };
    Ok(Corpus {
        train: split(0, sizes[0])?,
        dev: split(1, sizes[1])?,
        test: split(2, sizes[2])?,
        meta: CorpusMeta {
            lowercase: true,
            tokenizer: "synthetic".into(),
        },
    })
}
