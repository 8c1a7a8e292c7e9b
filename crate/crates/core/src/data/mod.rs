//! Corpus loading and writing, tokenisation and annotation.
//!
//! A corpus directory holds `train`, `dev` and `test` files, either
//! `<split>.jsonl` (one instance per line) or `<split>.xml` (the SemEval
//! instance/question/answer layout). Missing split files are treated as
//! empty.

mod annotate;
mod synthetic;
mod xml;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{
    attach_annotations, build_vocabs, load_sidecar, parse_sidecar, Annotator, InstanceTags,
};
pub use synthetic::{generate_synthetic, generate_with, synthetic_corpus, SyntheticConfig};
pub use xml::{parse_xml, write_xml};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub passage: Vec<String>,
    pub question: Vec<String>,
    pub choices: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Question type tag such as `commonsense` or `text`.
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl Instance {
    fn validate(&self) -> Result<()> {
        if self.choices.len() != 2 {
            return Err(Error::Data(format!(
                "instance {} has {} choices, expected 2",
                self.id,
                self.choices.len()
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Data(format!(
                    "instance {} has label {l}, expected 0 or 1",
                    self.id
                )));
            }
        }
        for (what, seq) in [("passage", &self.passage), ("question", &self.question)]
            .into_iter()
            .chain(self.choices.iter().map(|c| ("choice", c)))
        {
            if seq.is_empty() {
                return Err(Error::Data(format!(
                    "instance {} has an empty {what}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Xml,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Jsonl => "jsonl",
            Format::Xml => "xml",
        }
    }

    /// Guesses the format from a file extension.
    pub fn of_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Format::Jsonl),
            "xml" => Some(Format::Xml),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "xml" => Ok(Format::Xml),
            other => Err(Error::Usage(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Preprocessing applied while loading, recorded with the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub lowercase: bool,
    pub tokenizer: String,
}

impl Default for CorpusMeta {
    fn default() -> Self {
        CorpusMeta {
            lowercase: true,
            tokenizer: "whitespace+punctuation".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Instance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.dev.len(), self.test.len()]
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn find(&self, id: &str) -> Option<&Instance> {
        self.instances().find(|i| i.id == id)
    }
}

/// Splits on whitespace, then separates punctuation. Apostrophes and
/// hyphens between letters or digits stay inside the word.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            let inner = (ch == '\'' || ch == '-')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if ch.is_alphanumeric() || inner {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    if lowercase {
        out.iter_mut().for_each(|t| *t = t.to_lowercase());
    }
    out
}

fn check_unique(instances: &[Instance], source: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for inst in instances {
        if !seen.insert(inst.id.as_str()) {
            return Err(Error::Data(format!(
                "duplicate instance id {} in {source}",
                inst.id
            )));
        }
    }
    Ok(())
}

/// Reads one JSONL file. Tokens are taken as given (lowercased when
/// `meta.lowercase`).
pub fn parse_jsonl(text: &str, source: &str, meta: &CorpusMeta) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {source}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("{source}:{}", lineno + 1),
            message: e.to_string(),
        })?;
        if meta.lowercase {
            let lower = |v: &mut Vec<String>| v.iter_mut().for_each(|t| *t = t.to_lowercase());
            lower(&mut inst.passage);
            lower(&mut inst.question);
            inst.choices.iter_mut().for_each(lower);
        }
        inst.validate()
            .map_err(|e| Error::Data(format!("{source}:{}: {e}", lineno + 1)))?;
        out.push(inst);
    }
    check_unique(&out, source)?;
    Ok(out)
}

pub fn write_jsonl(instances: &[Instance], mut out: impl Write) -> Result<()> {
    for inst in instances {
        let line = serde_json::to_string(inst)
            .map_err(|e| Error::Internal(format!("encoding instance: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io("writing instances", e))?;
    }
    Ok(())
}

/// Loads a single split file, choosing the reader from `format` or the
/// file extension.
pub fn load_split_file(
    path: &Path,
    format: Option<Format>,
    meta: &CorpusMeta,
) -> Result<Vec<Instance>> {
    let format = format
        .or_else(|| Format::of_path(path))
        .ok_or_else(|| Error::Usage(format!("cannot tell the format of {}", path.display())))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let source = path.display().to_string();
    if text.trim().is_empty() {
        log::warn!("{source} is empty");
        return Ok(Vec::new());
    }
    let instances = match format {
        Format::Jsonl => parse_jsonl(&text, &source, meta)?,
        Format::Xml => parse_xml(&text, &source, meta)?,
    };
    Ok(instances)
}

pub fn split_path(dir: &Path, split: Split, format: Format) -> PathBuf {
    dir.join(format!("{}.{}", split.name(), format.extension()))
}

/// Loads `train`, `dev` and `test` from a corpus directory.
pub fn load_corpus(dir: &Path, format: Format) -> Result<Corpus> {
    load_corpus_with(dir, format, CorpusMeta::default())
}

pub fn load_corpus_with(dir: &Path, format: Format, meta: CorpusMeta) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(Error::io(
            format!("opening corpus {}", dir.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut corpus = Corpus {
        meta,
        ..Corpus::default()
    };
    for split in Split::ALL {
        let path = split_path(dir, split, format);
        if path.exists() {
            *corpus.split_mut(split) = load_split_file(&path, Some(format), &corpus.meta)?;
        } else {
            log::warn!("{} not found, {split} split is empty", path.display());
        }
    }
    Ok(corpus)
}

/// Writes every non-empty split as `<split>.<ext>` under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path, format: Format) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for split in Split::ALL {
        let path = split_path(dir, split, format);
        let file = fs::File::create(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let w = std::io::BufWriter::new(file);
        match format {
            Format::Jsonl => write_jsonl(corpus.split(split), w)?,
            Format::Xml => write_xml(corpus.split(split), w)?,
        }
    }
    Ok(())
}
