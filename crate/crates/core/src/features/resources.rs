//! Text resources: pretrained word vectors, corpus frequency counts and the
//! word-pair relation lexicon.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

/// A `|V|×dim` table with every row drawn from U(−0.1, 0.1) except the
/// padding row, which is zero.
pub fn random_word_table(vocab_len: usize, dim: usize, seed: u64) -> Result<Tensor<f64>> {
    random_word_table_scaled(vocab_len, dim, 0.1, seed)
}

/// Like [`random_word_table`] with rows drawn from U(−scale, scale).
pub fn random_word_table_scaled(
    vocab_len: usize,
    dim: usize,
    scale: f64,
    seed: u64,
) -> Result<Tensor<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Usage(format!(
            "word vector scale must be positive, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::<f64>::zeros(vec![vocab_len, dim])?;
    let data = t.data_mut();
    for (row, chunk) in data.chunks_mut(dim).enumerate() {
        for x in chunk.iter_mut() {
            let v = rng.gen_range(-scale..scale);
            if row != PAD {
                *x = v;
            }
        }
    }
    Ok(t)
}

/// Reads a `token v1 ... v_dim` text file and fills the rows of words in
/// `vocab`. Words missing from the file keep their random initial row.
/// Returns the table and the number of vocabulary rows found in the file.
pub fn load_word_vectors(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Tensor<f64>, usize)> {
    let mut table = random_word_table(vocab.len(), dim, seed)?;
    let mut seen = vec![false; vocab.len()];
    let mut found = 0;
    for (lineno, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < dim + 1 {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                message: format!(
                    "expected a token and {dim} values, got {} fields",
                    fields.len()
                ),
            });
        }
        // some pretrained files contain tokens with embedded spaces
        let split = fields.len() - dim;
        let token = fields[..split].join(" ");
        let Some(id) = vocab.get(&token) else {
            continue;
        };
        if id == PAD || seen[id] {
            continue;
        }
        let row = &mut table.data_mut()[id * dim..(id + 1) * dim];
        for (slot, raw) in row.iter_mut().zip(&fields[split..]) {
            *slot = raw.parse::<f64>().map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                message: format!("bad value {raw:?}: {e}"),
            })?;
        }
        seen[id] = true;
        found += 1;
    }
    Ok((table, found))
}

/// Corpus-level word counts used for the term-frequency feature.
#[derive(Debug, Clone, Default)]
pub struct FreqTable {
    counts: HashMap<String, u64>,
    max_count: u64,
}

impl FreqTable {
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut table = FreqTable::default();
        for (tok, c) in counts {
            let e = table.counts.entry(tok.into()).or_insert(0);
            *e += c;
            table.max_count = table.max_count.max(*e);
        }
        table
    }

    /// Counts every token in `sequences`.
    pub fn from_tokens<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        Self::from_counts(counts)
    }

    /// Reads `token<TAB>count` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in open(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                message,
            };
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>count".into()))?;
            let count = count
                .trim()
                .parse::<u64>()
                .map_err(|e| parse_err(format!("bad count {count:?}: {e}")))?;
            pairs.push((tok.to_string(), count));
        }
        Ok(Self::from_counts(pairs))
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn max_count(&self) -> u64 {
        self.max_count
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `ln(1 + count) / ln(1 + max_count)`, in `[0, 1]`; unseen tokens map to 0.
    pub fn term_frequency(&self, token: &str) -> f64 {
        let c = self.count(token);
        if c == 0 || self.max_count == 0 {
            return 0.0;
        }
        (c as f64).ln_1p() / (self.max_count as f64).ln_1p()
    }
}

/// Undirected word-pair relations, e.g. a dump of a commonsense graph.
#[derive(Debug, Clone, Default)]
pub struct RelationLexicon {
    pairs: HashMap<(String, String), BTreeSet<String>>,
    names: BTreeSet<String>,
}

impl RelationLexicon {
    fn key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    pub fn insert(&mut self, a: &str, b: &str, relation: &str) {
        self.pairs
            .entry(Self::key(a, b))
            .or_default()
            .insert(relation.to_string());
        self.names.insert(relation.to_string());
    }

    /// Reads `word1<TAB>word2<TAB>relation` lines. Words are lowercased when
    /// `lowercase` is set so they match a lowercased corpus.
    pub fn load(path: &Path, lowercase: bool) -> Result<Self> {
        let mut lex = RelationLexicon::default();
        for (lineno, line) in open(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [a, b, rel] = fields.as_slice() else {
                return Err(Error::Parse {
                    location: format!("{}:{}", path.display(), lineno + 1),
                    message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            };
            if lowercase {
                lex.insert(&a.to_lowercase(), &b.to_lowercase(), rel);
            } else {
                lex.insert(a, b, rel);
            }
        }
        Ok(lex)
    }

    /// Relations between `a` and `b`, in sorted order.
    pub fn relations(&self, a: &str, b: &str) -> impl Iterator<Item = &str> {
        self.pairs
            .get(&Self::key(a, b))
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
