//! From a loaded corpus and its side resources to model-ready examples.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{
    attach_annotations, build_vocabs, load_sidecar, Annotator, Corpus, InstanceTags, Split,
};
use crate::error::Result;
use crate::features::resources::{
    load_word_vectors, random_word_table_scaled, FreqTable, RelationLexicon,
};
use crate::features::Vocabs;
use crate::model::Example;
use crate::tensor::Tensor;

/// Vocabulary of the default synthetic corpus.
pub const SYNTH_VOCAB: usize = 120;

/// Word-vector spread used for synthetic corpora, similar to the per-dimension
/// spread of common pretrained vectors.
pub const SYNTH_VECTOR_SCALE: f64 = 1.0;

/// Optional inputs beyond the instances themselves.
#[derive(Debug, Clone)]
pub struct ResourceSet {
    pub embeddings: Option<PathBuf>,
    /// Half-width of the uniform draw for the word table when no embedding
    /// file is given.
    pub random_scale: f64,
    /// Falls back to counts over the corpus itself.
    pub freq: Option<FreqTable>,
    pub relations: RelationLexicon,
    pub pos: BTreeMap<Split, Vec<InstanceTags>>,
    pub ner: BTreeMap<Split, Vec<InstanceTags>>,
}

impl Default for ResourceSet {
    fn default() -> Self {
        ResourceSet {
            embeddings: None,
            random_scale: 0.1,
            freq: None,
            relations: RelationLexicon::default(),
            pos: BTreeMap::new(),
            ner: BTreeMap::new(),
        }
    }
}

impl ResourceSet {
    /// Picks up `<split>.pos` and `<split>.ner` sidecars found in `dir`.
    pub fn sidecars_from_dir(&mut self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            for (ext, map) in [("pos", &mut self.pos), ("ner", &mut self.ner)] {
                let path = dir.join(format!("{}.{ext}", split.name()));
                if path.is_file() {
                    map.insert(split, load_sidecar(&path)?);
                }
            }
        }
        Ok(())
    }

    fn freq_for(&self, corpus: &Corpus) -> FreqTable {
        self.freq.clone().unwrap_or_else(|| {
            FreqTable::from_tokens(corpus.instances().flat_map(|i| {
                [i.passage.as_slice(), i.question.as_slice()]
                    .into_iter()
                    .chain(i.choices.iter().map(Vec::as_slice))
            }))
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocabs: Vocabs,
    pub word_table: Tensor<f64>,
    /// Vocabulary rows filled from the embedding file.
    pub vectors_found: usize,
    pub splits: BTreeMap<Split, Vec<Example>>,
}

impl Prepared {
    pub fn split(&self, split: Split) -> &[Example] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }
}

/// Builds vocabularies over the whole corpus, loads or draws the word table
/// and annotates every split.
pub fn prepare(
    corpus: &Corpus,
    resources: &ResourceSet,
    word_dim: usize,
    seed: u64,
) -> Result<Prepared> {
    let vocabs = build_vocabs(
        corpus.instances(),
        resources.pos.values().flatten(),
        resources.ner.values().flatten(),
        &resources.relations,
    );
    let (word_table, vectors_found) = match &resources.embeddings {
        Some(path) => load_word_vectors(path, &vocabs.words, word_dim, seed)?,
        None => (
            random_word_table_scaled(vocabs.words.len(), word_dim, resources.random_scale, seed)?,
            0,
        ),
    };
    let splits = annotate(corpus, resources, &vocabs, seed)?;
    Ok(Prepared {
        vocabs,
        word_table,
        vectors_found,
        splits,
    })
}

/// Annotates every split against existing vocabularies, e.g. those stored
/// in a checkpoint.
pub fn annotate(
    corpus: &Corpus,
    resources: &ResourceSet,
    vocabs: &Vocabs,
    seed: u64,
) -> Result<BTreeMap<Split, Vec<Example>>> {
    let freq = resources.freq_for(corpus);
    let mut splits = BTreeMap::new();
    for (k, split) in Split::ALL.into_iter().enumerate() {
        let annotator = Annotator {
            vocabs,
            relations: &resources.relations,
            freq: &freq,
            seed: seed.wrapping_add(k as u64),
        };
        let examples = attach_annotations(
            corpus.split(split),
            resources.pos.get(&split).map(Vec::as_slice),
            resources.ner.get(&split).map(Vec::as_slice),
            &annotator,
        )?;
        splits.insert(split, examples);
    }
    Ok(splits)
}
