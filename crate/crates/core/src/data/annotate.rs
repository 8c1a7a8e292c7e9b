//! Turning token strings into feature ids.
//!
//! Sidecar tag files hold one line per instance, in corpus order:
//!
//! ```text
//! passage tags | question tags | choice-0 tags | choice-1 tags
//! ```
//!
//! with tags separated by spaces and aligned one-to-one with tokens.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Instance;
use crate::error::{Error, Result};
use crate::features::resources::{FreqTable, RelationLexicon};
use crate::features::vocab::{Vocabs, Vocabulary, UNK};
use crate::features::AnnotatedToken;
use crate::model::Example;

/// Tags of one instance, shaped like its tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceTags {
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub choices: Vec<Vec<String>>,
}

pub fn parse_sidecar(text: &str, source: &str) -> Result<Vec<InstanceTags>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<Vec<String>> = line
                .split('|')
                .map(|f| f.split_whitespace().map(str::to_string).collect())
                .collect();
            if fields.len() < 3 {
                return Err(Error::Parse {
                    location: format!("{source}:{}", i + 1),
                    message: format!(
                        "expected passage | question | choices, got {} fields",
                        fields.len()
                    ),
                });
            }
            let mut it = fields.into_iter();
            Ok(InstanceTags {
                passage: it.next().expect("checked"),
                question: it.next().expect("checked"),
                choices: it.collect(),
            })
        })
        .collect()
}

pub fn load_sidecar(path: &Path) -> Result<Vec<InstanceTags>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_sidecar(&text, &path.display().to_string())
}

fn check_alignment(inst: &Instance, tags: &InstanceTags, what: &str) -> Result<()> {
    let mismatch = |part: &str, tokens: usize, tags: usize| {
        Error::Alignment(format!(
            "instance {}: {part} has {tokens} tokens but {tags} {what} tags",
            inst.id
        ))
    };
    if inst.passage.len() != tags.passage.len() {
        return Err(mismatch("passage", inst.passage.len(), tags.passage.len()));
    }
    if inst.question.len() != tags.question.len() {
        return Err(mismatch(
            "question",
            inst.question.len(),
            tags.question.len(),
        ));
    }
    if inst.choices.len() != tags.choices.len() {
        return Err(Error::Alignment(format!(
            "instance {}: {} choices but {} {what} choice tag groups",
            inst.id,
            inst.choices.len(),
            tags.choices.len()
        )));
    }
    for (k, (c, t)) in inst.choices.iter().zip(&tags.choices).enumerate() {
        if c.len() != t.len() {
            return Err(mismatch(&format!("choice {k}"), c.len(), t.len()));
        }
    }
    Ok(())
}

/// Resources shared by every instance being annotated.
#[derive(Debug, Clone, Copy)]
pub struct Annotator<'a> {
    pub vocabs: &'a Vocabs,
    pub relations: &'a RelationLexicon,
    pub freq: &'a FreqTable,
    /// Seeds the pick among several applicable relations.
    pub seed: u64,
}

impl Annotator<'_> {
    /// Relation id of `token` against any word in `others`; one of several
    /// candidates is drawn from `rng`.
    fn relation(&self, token: &str, others: &BTreeSet<&str>, rng: &mut ChaCha8Rng) -> usize {
        let found: BTreeSet<&str> = others
            .iter()
            .flat_map(|o| self.relations.relations(token, o))
            .collect();
        let pick = match found.len() {
            0 => return UNK,
            1 => found.iter().next(),
            n => found.iter().nth(rng.gen_range(0..n)),
        };
        pick.map_or(UNK, |r| self.vocabs.rel.id(r))
    }

    fn sequence(
        &self,
        tokens: &[String],
        pos: Option<&[String]>,
        ner: Option<&[String]>,
        others: &BTreeSet<&str>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<AnnotatedToken> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| AnnotatedToken {
                word: self.vocabs.words.id(tok),
                pos: pos.map_or(UNK, |t| self.vocabs.pos.id(&t[i])),
                ner: ner.map_or(UNK, |t| self.vocabs.ner.id(&t[i])),
                rel: self.relation(tok, others, rng),
                tf: self.freq.term_frequency(tok),
            })
            .collect()
    }
}

/// Maps instances to feature ids.
///
/// Choice tokens carry their relation to any passage or question word;
/// passage and question tokens carry their relation to any word of either
/// choice. Missing sidecars leave POS/NER at the none id.
pub fn attach_annotations(
    instances: &[Instance],
    pos: Option<&[InstanceTags]>,
    ner: Option<&[InstanceTags]>,
    annotator: &Annotator<'_>,
) -> Result<Vec<Example>> {
    for (tags, what) in [(pos, "pos"), (ner, "ner")] {
        if let Some(t) = tags {
            if t.len() != instances.len() {
                return Err(Error::Alignment(format!(
                    "{} {what} sidecar lines for {} instances",
                    t.len(),
                    instances.len()
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(annotator.seed);
    instances
        .iter()
        .enumerate()
        .map(|(n, inst)| {
            let pos_tags = pos.map(|t| &t[n]);
            let ner_tags = ner.map(|t| &t[n]);
            if let Some(t) = pos_tags {
                check_alignment(inst, t, "pos")?;
            }
            if let Some(t) = ner_tags {
                check_alignment(inst, t, "ner")?;
            }
            let context: BTreeSet<&str> = inst
                .passage
                .iter()
                .chain(&inst.question)
                .map(String::as_str)
                .collect();
            let choice_words: BTreeSet<&str> =
                inst.choices.iter().flatten().map(String::as_str).collect();
            let passage = annotator.sequence(
                &inst.passage,
                pos_tags.map(|t| t.passage.as_slice()),
                ner_tags.map(|t| t.passage.as_slice()),
                &choice_words,
                &mut rng,
            );
            let question = annotator.sequence(
                &inst.question,
                pos_tags.map(|t| t.question.as_slice()),
                ner_tags.map(|t| t.question.as_slice()),
                &choice_words,
                &mut rng,
            );
            let choices = inst
                .choices
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    annotator.sequence(
                        c,
                        pos_tags.map(|t| t.choices[k].as_slice()),
                        ner_tags.map(|t| t.choices[k].as_slice()),
                        &context,
                        &mut rng,
                    )
                })
                .collect();
            Ok(Example {
                id: inst.id.clone(),
                passage,
                question,
                choices,
                label: inst.label,
            })
        })
        .collect()
}

fn extend_tags<'a>(vocab: &mut Vocabulary, tags: impl IntoIterator<Item = &'a InstanceTags>) {
    for t in tags {
        for tag in t
            .passage
            .iter()
            .chain(&t.question)
            .chain(t.choices.iter().flatten())
        {
            vocab.insert(tag);
        }
    }
}

/// Vocabularies covering every token, tag and relation name seen.
pub fn build_vocabs<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    pos: impl IntoIterator<Item = &'a InstanceTags>,
    ner: impl IntoIterator<Item = &'a InstanceTags>,
    relations: &RelationLexicon,
) -> Vocabs {
    let mut v = Vocabs::default();
    for inst in instances {
        for tok in inst
            .passage
            .iter()
            .chain(&inst.question)
            .chain(inst.choices.iter().flatten())
        {
            v.words.insert(tok);
        }
    }
    extend_tags(&mut v.pos, pos);
    extend_tags(&mut v.ner, ner);
    for r in relations.relation_names() {
        v.rel.insert(r);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(passage: &str, question: &str, c0: &str, c1: &str) -> Instance {
        let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        Instance {
            id: "i1".into(),
            passage: t(passage),
            question: t(question),
            choices: vec![t(c0), t(c1)],
            label: Some(0),
            kind: None,
        }
    }

    fn lexicon() -> RelationLexicon {
        let mut lex = RelationLexicon::default();
        lex.insert("bed", "sleep", "RelatedTo");
        lex.insert("nap", "tired", "Causes");
        lex.insert("nap", "tired", "RelatedTo");
        lex
    }

    #[test]
    fn direct_relation_hit() {
        let lex = lexicon();
        let data = [inst("he went to bed", "why", "to sleep", "to eat")];
        let vocabs = build_vocabs(&data, [], [], &lex);
        let freq = FreqTable::default();
        let a = Annotator {
            vocabs: &vocabs,
            relations: &lex,
            freq: &freq,
            seed: 1,
        };
        let ex = attach_annotations(&data, None, None, &a).unwrap();
        let related = vocabs.rel.id("RelatedTo");
        assert_eq!(ex[0].choices[0][1].rel, related);
        assert_eq!(ex[0].choices[0][0].rel, UNK);
        assert!(ex[0].choices[1].iter().all(|t| t.rel == UNK));
        // the reverse direction lands on the passage token
        assert_eq!(ex[0].passage[3].rel, related);
        assert_eq!(ex[0].passage[3].pos, UNK);
    }

    #[test]
    fn multi_relation_pick_is_seeded() {
        let lex = lexicon();
        let data: Vec<Instance> = (0..40)
            .map(|i| Instance {
                id: format!("q{i}"),
                ..inst("a nap", "so", "tired", "x")
            })
            .collect();
        let vocabs = build_vocabs(&data, [], [], &lex);
        let freq = FreqTable::default();
        let picks = |seed| {
            let a = Annotator {
                vocabs: &vocabs,
                relations: &lex,
                freq: &freq,
                seed,
            };
            attach_annotations(&data, None, None, &a)
                .unwrap()
                .iter()
                .map(|e| e.choices[0][0].rel)
                .collect::<Vec<_>>()
        };
        let first = picks(5);
        assert_eq!(first, picks(5));
        let distinct: BTreeSet<usize> = first.iter().copied().collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn sidecar_alignment() {
        let data = [inst("a b", "c", "d", "e f")];
        let good = parse_sidecar("DT NN | VB | NN | NN NN\n", "pos").unwrap();
        let bad = parse_sidecar("DT | VB | NN | NN NN\n", "pos").unwrap();
        let lex = RelationLexicon::default();
        let vocabs = build_vocabs(&data, &good, [], &lex);
        let freq = FreqTable::default();
        let a = Annotator {
            vocabs: &vocabs,
            relations: &lex,
            freq: &freq,
            seed: 1,
        };
        let ex = attach_annotations(&data, Some(&good), None, &a).unwrap();
        assert_eq!(ex[0].passage[1].pos, vocabs.pos.id("NN"));
        let err = attach_annotations(&data, Some(&bad), None, &a).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)) && err.to_string().contains("i1"));
    }
}
