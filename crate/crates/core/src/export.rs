//! Dumps per-token fusion matrices and attention maps of one instance.
//!
//! Every matrix is a tab-separated file. The first line is a header whose
//! first cell is `token` and whose remaining cells name the columns (`d0`,
//! `d1`, ... for hidden dimensions, or the attended tokens for attention
//! maps). Each further line starts with the choice token owning the row.
//! Files are named `choice{k}.{matrix}.tsv`:
//!
//! | matrix                 | shape                  |
//! |------------------------|------------------------|
//! | `union.pre`            | \|c\| × 3·ctx          |
//! | `difference.pre`       | \|c\| × ctx            |
//! | `similarity.pre`       | \|c\| × ctx            |
//! | `{name}.post`          | \|c\| × fnn hidden     |
//! | `word_attn.passage`    | \|c\| × \|p\|          |
//! | `word_attn.question`   | \|c\| × \|q\|          |
//! | `context_attn.passage` | \|c\| × \|p\|          |
//! | `context_attn.question`| \|c\| × \|q\|          |
//! | `self_attn`            | \|c\| × 1              |
//!
//! Only active perspectives and enabled word-level attention appear.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::fusion;
use crate::mode::Mode;
use crate::model::{Example, Model};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub name: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major, `rows × cols`.
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token");
        for c in &self.col_labels {
            out.push('\t');
            out.push_str(&sanitize(c));
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(&sanitize(label));
            for v in self.row(r) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n'], " ")
}

/// What to feed the fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionInput {
    /// The attended passage and question contexts, as in scoring.
    #[default]
    Attended,
    /// The choice context in place of its attended passage context. The
    /// difference perspective then vanishes identically, which makes a
    /// quick end-to-end check of the export path.
    SelfPassage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceExport {
    pub choice: usize,
    pub matrices: Vec<Matrix>,
}

impl ChoiceExport {
    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.matrices.iter().find(|m| m.name == name)
    }
}

fn dims(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn grab<T: Real>(
    graph: &Graph<'_, T>,
    v: Var,
    name: &str,
    rows: &[String],
    cols: Vec<String>,
) -> Result<Matrix> {
    let values: Vec<f64> = graph.tape.value(v).iter().map(|x| x.as_f64()).collect();
    if values.len() != rows.len() * cols.len() {
        return Err(Error::dim(
            "export",
            format!(
                "{name} has {} values for {}×{}",
                values.len(),
                rows.len(),
                cols.len()
            ),
        ));
    }
    Ok(Matrix {
        name: name.to_string(),
        row_labels: rows.to_vec(),
        col_labels: cols,
        values,
    })
}

/// Runs `model` on `ex` in eval mode and collects the matrices of both
/// choices. `inst` supplies the token strings for labels and must be the
/// instance `ex` was annotated from.
pub fn export_fusion<T: Real>(
    model: &Model<T>,
    ex: &Example,
    inst: &Instance,
    input: FusionInput,
) -> Result<Vec<ChoiceExport>> {
    if inst.id != ex.id
        || inst.choices.len() != ex.choices.len()
        || inst.passage.len() != ex.passage.len()
        || inst.question.len() != ex.question.len()
    {
        return Err(Error::Internal(format!(
            "instance {} does not match its annotation",
            inst.id
        )));
    }
    let mut graph = Graph::new(&model.params);
    let fwd = model.forward(&mut graph, ex, &mut Mode::Eval)?;
    let cfg = &model.config;
    let mut out = Vec::new();
    for (k, trace) in fwd.choices.iter().enumerate() {
        let rows = &inst.choices[k];
        let fused = match input {
            FusionInput::Attended => trace.fusion.clone(),
            FusionInput::SelfPassage => fusion::global_representation(
                &mut graph,
                trace.context,
                trace.context,
                trace.aware_question,
                &cfg.fusion,
            )?,
        };
        let mut matrices = Vec::new();
        for &(p, v) in &fused.fused {
            let width = graph.tape.shape(v).dims()[1];
            matrices.push(grab(
                &graph,
                v,
                &format!("{}.pre", p.name()),
                rows,
                dims("d", width),
            )?);
        }
        for &(p, v) in &fused.projected {
            let width = graph.tape.shape(v).dims()[1];
            matrices.push(grab(
                &graph,
                v,
                &format!("{}.post", p.name()),
                rows,
                dims("d", width),
            )?);
        }
        if let Some(a) = trace.word_alpha_passage {
            matrices.push(grab(
                &graph,
                a,
                "word_attn.passage",
                rows,
                inst.passage.clone(),
            )?);
        }
        if let Some(a) = trace.word_alpha_question {
            matrices.push(grab(
                &graph,
                a,
                "word_attn.question",
                rows,
                inst.question.clone(),
            )?);
        }
        matrices.push(grab(
            &graph,
            trace.beta_passage,
            "context_attn.passage",
            rows,
            inst.passage.clone(),
        )?);
        matrices.push(grab(
            &graph,
            trace.beta_question,
            "context_attn.question",
            rows,
            inst.question.clone(),
        )?);
        let pool = graph.tape.transpose(trace.pool)?;
        matrices.push(grab(
            &graph,
            pool,
            "self_attn",
            rows,
            vec!["weight".into()],
        )?);
        out.push(ChoiceExport {
            choice: k,
            matrices,
        });
    }
    Ok(out)
}

/// Writes every matrix under `dir`, returning the paths written.
pub fn write_exports(exports: &[ChoiceExport], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    for e in exports {
        for m in &e.matrices {
            let path = dir.join(format!("choice{}.{}.tsv", e.choice, m.name));
            fs::write(&path, m.to_tsv())
                .map_err(|err| Error::io(format!("writing {}", path.display()), err))?;
            written.push(path);
        }
    }
    Ok(written)
}
