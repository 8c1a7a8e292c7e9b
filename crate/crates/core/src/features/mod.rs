//! Per-token input vectors for passage, question and choice.
//!
//! Passage and question rows are `[word ; pos ; ner ; rel ; tf]`. Choice rows
//! are `[word ; passage-aware ; question-aware]`, where the aware parts are
//! attention-weighted sums of passage/question word vectors scored by
//! `ReLU(W c)ᵀ ReLU(W p)`.

pub mod resources;
pub mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub use resources::{
    load_word_vectors, random_word_table, random_word_table_scaled, FreqTable, RelationLexicon,
};
pub use vocab::{Vocabs, Vocabulary, PAD, UNK};

pub const WORD_TABLE: &str = "embed.word";
pub const POS_TABLE: &str = "embed.pos";
pub const NER_TABLE: &str = "embed.ner";
pub const REL_TABLE: &str = "embed.rel";
pub const ATTN_SHARED: &str = "attn.word.w";
pub const ATTN_PASSAGE: &str = "attn.word.w_p";
pub const ATTN_QUESTION: &str = "attn.word.w_q";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub word: usize,
    pub pos: usize,
    pub ner: usize,
    pub rel: usize,
    /// Width of the projection inside the word-level attention scores.
    pub attn: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        EmbeddingDims {
            word: 300,
            pos: 12,
            ner: 8,
            rel: 10,
            attn: 123,
        }
    }
}

/// Which encoding inputs are present. Everything on is the full model; the
/// switches drive the input ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputConfig {
    pub pos: bool,
    pub ner: bool,
    pub rel: bool,
    pub tf: bool,
    /// Passage-aware word attention on choice tokens.
    pub choice_passage: bool,
    /// Question-aware word attention on choice tokens.
    pub choice_question: bool,
    /// One projection for both word-level attention paths.
    pub share_attention: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            pos: true,
            ner: true,
            rel: true,
            tf: true,
            choice_passage: true,
            choice_question: true,
            share_attention: true,
        }
    }
}

impl InputConfig {
    /// Row width of passage and question embeddings.
    pub fn context_width(&self, dims: &EmbeddingDims) -> usize {
        dims.word
            + if self.pos { dims.pos } else { 0 }
            + if self.ner { dims.ner } else { 0 }
            + if self.rel { dims.rel } else { 0 }
            + usize::from(self.tf)
    }

    /// Row width of composed choice embeddings.
    pub fn choice_width(&self, dims: &EmbeddingDims) -> usize {
        dims.word * (1 + usize::from(self.choice_passage) + usize::from(self.choice_question))
    }
}

/// One token and its feature ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub word: usize,
    pub pos: usize,
    pub ner: usize,
    pub rel: usize,
    pub tf: f64,
}

impl AnnotatedToken {
    pub fn padding() -> Self {
        AnnotatedToken {
            word: PAD,
            pos: PAD,
            ner: PAD,
            rel: UNK,
            tf: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Passage,
    Question,
    Choice,
}

/// Registers the embedding tables and the word-attention projection.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    vocabs: &Vocabs,
    word_table: &Tensor<f64>,
    dims: &EmbeddingDims,
    inputs: &InputConfig,
    rng: &mut R,
) -> Result<()> {
    if word_table.dims() != [vocabs.words.len(), dims.word] {
        return Err(Error::Config(format!(
            "word table is {:?}, expected [{}, {}]",
            word_table.dims(),
            vocabs.words.len(),
            dims.word
        )));
    }
    store.insert(WORD_TABLE, word_table.cast::<T>().with_requires_grad(false))?;
    let tables = [
        (POS_TABLE, inputs.pos, vocabs.pos.len(), dims.pos),
        (NER_TABLE, inputs.ner, vocabs.ner.len(), dims.ner),
        (REL_TABLE, inputs.rel, vocabs.rel.len(), dims.rel),
    ];
    for (name, on, rows, width) in tables {
        if on {
            let t = Tensor::<T>::uniform(vec![rows, width], -0.1, 0.1, rng)?;
            store.insert(name, t.with_requires_grad(true))?;
        }
    }
    if inputs.choice_passage || inputs.choice_question {
        if inputs.share_attention {
            store.insert(
                ATTN_SHARED,
                Tensor::xavier(dims.word, dims.attn, rng)?.with_requires_grad(true),
            )?;
        } else {
            for (name, on) in [
                (ATTN_PASSAGE, inputs.choice_passage),
                (ATTN_QUESTION, inputs.choice_question),
            ] {
                if on {
                    store.insert(
                        name,
                        Tensor::xavier(dims.word, dims.attn, rng)?.with_requires_grad(true),
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Looked-up embeddings of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceEmbedding {
    /// `n × word` word vectors (after embedding dropout in training).
    pub words: Var,
    /// Full encoder input; for choices this is just `words` until
    /// [`compose_choice`] appends the aware parts.
    pub full: Var,
}

fn check_ids(store_rows: usize, ids: &[usize], what: &str) -> Result<()> {
    match ids.iter().find(|&&i| i >= store_rows) {
        Some(bad) => Err(Error::Data(format!(
            "{what} id {bad} outside table of {store_rows} rows"
        ))),
        None => Ok(()),
    }
}

fn gather_table<T: Real>(
    graph: &mut Graph<'_, T>,
    name: &str,
    ids: &[usize],
    what: &str,
) -> Result<Var> {
    let rows = graph.store().get(name)?.dims()[0];
    check_ids(rows, ids, what)?;
    let table = graph.param(name)?;
    graph.tape.gather_rows(table, ids)
}

/// Whether a tag table is used, its name, the tag lookup and a label for errors.
type FeatureColumn = (
    bool,
    &'static str,
    fn(&AnnotatedToken) -> usize,
    &'static str,
);

pub fn lookup_sequence<T: Real>(
    graph: &mut Graph<'_, T>,
    tokens: &[AnnotatedToken],
    role: Role,
    inputs: &InputConfig,
    mode: &mut Mode<'_>,
) -> Result<SequenceEmbedding> {
    if tokens.is_empty() {
        return Err(Error::Data(format!("empty {role:?} sequence")));
    }
    let ids: Vec<usize> = tokens.iter().map(|t| t.word).collect();
    let mut words = gather_table(graph, WORD_TABLE, &ids, "word")?;
    if let Mode::Train {
        emb_dropout, rng, ..
    } = mode
    {
        words = graph.tape.dropout(words, *emb_dropout, &mut **rng)?;
    }
    if role == Role::Choice {
        return Ok(SequenceEmbedding { words, full: words });
    }

    let mut parts = vec![words];
    let features: [FeatureColumn; 3] = [
        (inputs.pos, POS_TABLE, |t| t.pos, "pos"),
        (inputs.ner, NER_TABLE, |t| t.ner, "ner"),
        (inputs.rel, REL_TABLE, |t| t.rel, "relation"),
    ];
    for (on, table, field, what) in features {
        if on {
            let ids: Vec<usize> = tokens.iter().map(field).collect();
            parts.push(gather_table(graph, table, &ids, what)?);
        }
    }
    if inputs.tf {
        let tf: Vec<T> = tokens.iter().map(|t| T::lit(t.tf)).collect();
        parts.push(graph.tape.constant(vec![tokens.len(), 1], tf)?);
    }
    let full = graph.tape.concat(&parts, 1)?;
    Ok(SequenceEmbedding { words, full })
}

/// Attention of each choice row over `other`: returns the attended rows and
/// the `|c| × n` weight matrix.
pub fn word_level_attention<T: Real>(
    graph: &mut Graph<'_, T>,
    choice: Var,
    other: Var,
    projection: Var,
) -> Result<(Var, Var)> {
    let tape = &mut graph.tape;
    let (_, wc) = tape.shape(choice).as_matrix("word_level_attention")?;
    let (_, wo) = tape.shape(other).as_matrix("word_level_attention")?;
    if wc != wo {
        return Err(Error::dim(
            "word_level_attention",
            format!("widths {wc} vs {wo}"),
        ));
    }
    let pc = tape.matmul(choice, projection)?;
    let pc = tape.relu(pc)?;
    let po = tape.matmul(other, projection)?;
    let po = tape.relu(po)?;
    let po_t = tape.transpose(po)?;
    let scores = tape.matmul(pc, po_t)?;
    let alpha = tape.softmax(scores, 1)?;
    let attended = tape.matmul(alpha, other)?;
    Ok((attended, alpha))
}

/// `[c ; c^p ; c^q]`, dropping whichever aware part is `None`.
pub fn compose_choice<T: Real>(
    graph: &mut Graph<'_, T>,
    words: Var,
    passage_aware: Option<Var>,
    question_aware: Option<Var>,
) -> Result<Var> {
    let rows = graph.tape.shape(words).dims()[0];
    let mut parts = vec![words];
    for v in [passage_aware, question_aware].into_iter().flatten() {
        let r = graph.tape.shape(v).dims()[0];
        if r != rows {
            return Err(Error::dim("compose_choice", format!("{r} rows vs {rows}")));
        }
        parts.push(v);
    }
    graph.tape.concat(&parts, 1)
}

/// Projection used for the passage (`true`) or question (`false`) path.
pub fn attention_param(inputs: &InputConfig, passage: bool) -> &'static str {
    match (inputs.share_attention, passage) {
        (true, _) => ATTN_SHARED,
        (false, true) => ATTN_PASSAGE,
        (false, false) => ATTN_QUESTION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(inputs: InputConfig) -> (ParamStore<f64>, Vocabs) {
        let mut vocabs = Vocabs::default();
        for w in ["the", "boy", "bed"] {
            vocabs.words.insert(w);
        }
        vocabs.pos.insert("NN");
        vocabs.rel.insert("RelatedTo");
        let table = random_word_table(vocabs.words.len(), 300, 1).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_params(
            &mut store,
            &vocabs,
            &table,
            &EmbeddingDims::default(),
            &inputs,
            &mut rng,
        )
        .unwrap();
        (store, vocabs)
    }

    fn tok(word: usize) -> AnnotatedToken {
        AnnotatedToken {
            word,
            pos: 2,
            ner: UNK,
            rel: UNK,
            tf: 0.5,
        }
    }

    #[test]
    fn passage_rows_are_331_wide() {
        let inputs = InputConfig::default();
        let (store, _) = setup(inputs);
        let mut g = Graph::new(&store);
        let e =
            lookup_sequence(&mut g, &[tok(2)], Role::Passage, &inputs, &mut Mode::Eval).unwrap();
        assert_eq!(g.tape.shape(e.full).dims(), &[1, 331]);
        assert_eq!(inputs.context_width(&EmbeddingDims::default()), 331);
        let row = g.tape.value(e.full);
        assert_eq!(row[330], 0.5);
        assert_eq!(&row[..300], store.get(WORD_TABLE).unwrap().row(2));
    }

    #[test]
    fn padding_and_unknown_rows() {
        let inputs = InputConfig::default();
        let (store, _) = setup(inputs);
        let mut g = Graph::new(&store);
        let e = lookup_sequence(
            &mut g,
            &[AnnotatedToken::padding(), tok(UNK)],
            Role::Choice,
            &inputs,
            &mut Mode::Eval,
        )
        .unwrap();
        let v = g.tape.value(e.words);
        assert!(v[..300].iter().all(|&x| x == 0.0));
        assert_eq!(&v[300..], store.get(WORD_TABLE).unwrap().row(UNK));
        assert!(v[300..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn out_of_range_id_is_a_data_error() {
        let inputs = InputConfig::default();
        let (store, _) = setup(inputs);
        let mut g = Graph::new(&store);
        let mut bad = tok(2);
        bad.pos = 99;
        let err =
            lookup_sequence(&mut g, &[bad], Role::Question, &inputs, &mut Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn ablated_inputs_shrink_width() {
        let inputs = InputConfig {
            pos: false,
            tf: false,
            ..InputConfig::default()
        };
        let (store, _) = setup(inputs);
        assert!(!store.contains(POS_TABLE));
        let mut g = Graph::new(&store);
        let e = lookup_sequence(
            &mut g,
            &[tok(2), tok(3)],
            Role::Passage,
            &inputs,
            &mut Mode::Eval,
        )
        .unwrap();
        assert_eq!(g.tape.shape(e.full).dims(), &[2, 318]);
    }

    #[test]
    fn compose_widths() {
        let inputs = InputConfig::default();
        let (store, _) = setup(inputs);
        let mut g = Graph::new(&store);
        let c = g.tape.constant(vec![2, 300], vec![0.1; 600]).unwrap();
        let p = g.tape.constant(vec![2, 300], vec![0.2; 600]).unwrap();
        let q = g.tape.constant(vec![2, 300], vec![0.3; 600]).unwrap();
        let full = compose_choice(&mut g, c, Some(p), Some(q)).unwrap();
        assert_eq!(g.tape.shape(full).dims(), &[2, 900]);
        let cq = compose_choice(&mut g, c, None, Some(q)).unwrap();
        assert_eq!(g.tape.shape(cq).dims(), &[2, 600]);
        let alone = compose_choice(&mut g, c, None, None).unwrap();
        assert_eq!(g.tape.shape(alone).dims(), &[2, 300]);
        let short = g.tape.constant(vec![1, 300], vec![0.0; 300]).unwrap();
        assert!(compose_choice(&mut g, c, Some(short), None).is_err());
    }

    #[test]
    fn single_key_attention_returns_key() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = g
            .tape
            .input(Tensor::uniform(vec![3, 300], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
        let key = Tensor::uniform(vec![1, 300], -1.0, 1.0, &mut rng).unwrap();
        let key_v = g.tape.input(key.clone()).unwrap();
        let w = g
            .tape
            .input(Tensor::xavier(300, 123, &mut rng).unwrap())
            .unwrap();
        let (out, alpha) = word_level_attention(&mut g, c, key_v, w).unwrap();
        assert_eq!(g.tape.value(alpha), &[1.0, 1.0, 1.0]);
        for r in g.tape.value(out).chunks(300) {
            assert_eq!(r, key.data());
        }
    }

    #[test]
    fn zero_projection_gives_mean() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = g
            .tape
            .input(Tensor::uniform(vec![2, 300], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
        let other = Tensor::<f64>::uniform(vec![3, 300], -1.0, 1.0, &mut rng).unwrap();
        let o = g.tape.input(other.clone()).unwrap();
        let w = g
            .tape
            .constant(vec![300, 123], vec![0.0; 300 * 123])
            .unwrap();
        let (out, _) = word_level_attention(&mut g, c, o, w).unwrap();
        let out = g.tape.value(out);
        for r in 0..2 {
            for k in 0..300 {
                let mean = (other.at(0, k) + other.at(1, k) + other.at(2, k)) / 3.0;
                assert!((out[r * 300 + k] - mean).abs() < 1e-12);
            }
        }
    }
}
