//! Perspective, input and interaction sweeps.
//!
//! Every row trains one configuration per seed and reports the mean dev
//! accuracy next to the published MCScript figure for the same row, when
//! there is one. The published figures come from a far larger corpus and
//! are printed for orientation only.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{InputConfig, Vocabs};
use crate::fusion::{Perspectives, PostAggregation};
use crate::model::{Example, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig};

/// Published test accuracy per perspective subset: plain and with the
/// recurrent post-aggregation.
pub const PERSPECTIVE_REFERENCE: [(&str, f64, f64); 7] = [
    ("U", 82.73, 82.73),
    ("D", 82.27, 81.77),
    ("S", 81.55, 80.59),
    ("DU", 82.84, 82.16),
    ("SU", 82.48, 82.87),
    ("SD", 83.12, 83.09),
    ("SDU", 83.52, 82.70),
];

/// Published test accuracy with one encoding input removed.
pub const INPUT_REFERENCE: [(&str, f64); 7] = [
    ("w/o POS", 82.70),
    ("w/o NER", 82.62),
    ("w/o Rel", 81.98),
    ("w/o TF", 81.91),
    ("w/o C^p", 81.62),
    ("w/o C^q", 82.16),
    ("w/o C^p & C^q", 81.66),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputDrop {
    Pos,
    Ner,
    Rel,
    Tf,
    ChoicePassage,
    ChoiceQuestion,
    BothAware,
}

impl InputDrop {
    pub const ALL: [InputDrop; 7] = [
        InputDrop::Pos,
        InputDrop::Ner,
        InputDrop::Rel,
        InputDrop::Tf,
        InputDrop::ChoicePassage,
        InputDrop::ChoiceQuestion,
        InputDrop::BothAware,
    ];

    pub fn label(self) -> &'static str {
        INPUT_REFERENCE[self as usize].0
    }

    pub fn apply(self, mut inputs: InputConfig) -> InputConfig {
        match self {
            InputDrop::Pos => inputs.pos = false,
            InputDrop::Ner => inputs.ner = false,
            InputDrop::Rel => inputs.rel = false,
            InputDrop::Tf => inputs.tf = false,
            InputDrop::ChoicePassage => inputs.choice_passage = false,
            InputDrop::ChoiceQuestion => inputs.choice_question = false,
            InputDrop::BothAware => {
                inputs.choice_passage = false;
                inputs.choice_question = false;
            }
        }
        inputs
    }
}

/// One configuration to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    /// Which published column the row belongs to.
    pub column: String,
    pub config: ModelConfig,
    pub reference: Option<f64>,
}

/// The seven perspective subsets, optionally repeated with recurrent
/// post-aggregation.
pub fn perspective_sweep(base: &ModelConfig, with_birnn: bool) -> Vec<Variant> {
    let mut columns = vec![(PostAggregation::None, "MPFN")];
    if with_birnn {
        columns.push((PostAggregation::BiRnn, "+BiLSTM"));
    }
    let mut out = Vec::new();
    for (agg, column) in columns {
        for (set, (label, plain, birnn)) in
            Perspectives::sweep().into_iter().zip(PERSPECTIVE_REFERENCE)
        {
            debug_assert_eq!(set.label(), label);
            let mut config = *base;
            config.fusion.perspectives = set;
            config.fusion.post_aggregation = agg;
            out.push(Variant {
                label: label.to_string(),
                column: column.to_string(),
                config,
                reference: Some(if agg == PostAggregation::None {
                    plain
                } else {
                    birnn
                }),
            });
        }
    }
    out
}

/// The full model with each encoding input removed in turn.
pub fn input_ablation(base: &ModelConfig) -> Vec<Variant> {
    InputDrop::ALL
        .into_iter()
        .zip(INPUT_REFERENCE)
        .map(|(drop, (label, reference))| {
            let mut config = *base;
            config.inputs = drop.apply(base.inputs);
            Variant {
                label: label.to_string(),
                column: "MPFN".into(),
                config,
                reference: Some(reference),
            }
        })
        .collect()
}

/// Word-level interaction settings crossed with the single perspectives.
pub fn interaction_grid(base: &ModelConfig) -> Vec<Variant> {
    let settings = [
        ("C^p & C^q", true, true),
        ("C^p only", true, false),
        ("C^q only", false, true),
        ("none", false, false),
    ];
    let mut out = Vec::new();
    for (name, cp, cq) in settings {
        for single in ["U", "D", "S"] {
            let mut config = *base;
            config.inputs.choice_passage = cp;
            config.inputs.choice_question = cq;
            config.fusion.perspectives = single.parse::<Perspectives>().expect("fixed labels");
            out.push(Variant {
                label: single.to_string(),
                column: name.to_string(),
                config,
                reference: None,
            });
        }
    }
    out
}

/// Training data shared by every variant.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub vocabs: &'a Vocabs,
    pub word_table: &'a Tensor<f64>,
    pub train: &'a [Example],
    pub dev: &'a [Example],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub column: String,
    /// Best dev accuracy per seed, in seed order.
    pub dev_acc: Vec<f64>,
    pub reference: Option<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        if self.dev_acc.is_empty() {
            return 0.0;
        }
        self.dev_acc.iter().sum::<f64>() / self.dev_acc.len() as f64
    }

    pub fn std(&self) -> f64 {
        let n = self.dev_acc.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.dev_acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Trains every variant once per seed on a pool of `workers` threads.
/// Model seeds and training seeds are both taken from `seeds`.
pub fn run(
    variants: &[Variant],
    data: AblationData<'_>,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    for v in variants {
        v.config.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("building thread pool: {e}")))?;
    let results: Vec<f64> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let variant = &variants[v];
                let model =
                    Model::<f64>::new(variant.config, data.vocabs.clone(), data.word_table, seed)?;
                let cfg = TrainConfig {
                    seed,
                    threads: None,
                    ..*train_cfg
                };
                let outcome = train(model, data.train, data.dev, &cfg)?;
                log::info!(
                    "{} [{}] seed {seed}: dev {:.4} at epoch {}",
                    variant.label,
                    variant.column,
                    outcome.best_dev_acc,
                    outcome.best_epoch
                );
                Ok(outcome.best_dev_acc)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, variant)| AblationRow {
            label: variant.label.clone(),
            column: variant.column.clone(),
            dev_acc: results[v * seeds.len()..(v + 1) * seeds.len()].to_vec(),
            reference: variant.reference,
        })
        .collect())
}

/// Tab-separated report. Measured values are dev accuracy in percent on the
/// corpus at hand; `reference` is the published figure for the row.
pub fn report(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("column\trow\tmeasured_mean\tmeasured_std\tseeds\treference_mcscript\n");
    for r in rows {
        let reference = r
            .reference
            .map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}\t{:.2}\t{}\t{}",
            r.column,
            r.label,
            100.0 * r.mean(),
            100.0 * r.std(),
            r.dev_acc.len(),
            reference
        );
    }
    out
}

/// Multi-perspective rows whose mean falls below the worst single
/// perspective of the same column.
pub fn ordering_violations(rows: &[AblationRow]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut columns: Vec<&str> = rows.iter().map(|r| r.column.as_str()).collect();
    columns.dedup();
    for column in columns {
        let in_column = || rows.iter().filter(move |r| r.column == column);
        let worst_single = in_column()
            .filter(|r| r.label.len() == 1)
            .map(AblationRow::mean)
            .fold(f64::INFINITY, f64::min);
        for r in in_column().filter(|r| r.label.len() > 1) {
            if r.mean() < worst_single {
                bad.push(format!("{column}/{}", r.label));
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_rows_and_references() {
        let rows = perspective_sweep(&ModelConfig::default(), true);
        let labels: Vec<&str> = rows.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(&labels[..7], ["U", "D", "S", "DU", "SU", "SD", "SDU"]);
        assert_eq!(rows.len(), 14);
        assert_eq!(rows[6].reference, Some(83.52));
        assert_eq!(
            rows[13].config.fusion.post_aggregation,
            PostAggregation::BiRnn
        );
        assert_eq!(perspective_sweep(&ModelConfig::default(), false).len(), 7);
    }

    #[test]
    fn input_rows_drop_one_thing() {
        let rows = input_ablation(&ModelConfig::default());
        assert_eq!(rows.len(), 7);
        assert!(!rows[0].config.inputs.pos && rows[0].config.inputs.ner);
        let both = &rows[6].config.inputs;
        assert!(!both.choice_passage && !both.choice_question && both.tf);
        assert_eq!(rows[4].label, "w/o C^p");
    }

    #[test]
    fn grid_is_four_by_three() {
        let rows = interaction_grid(&ModelConfig::default());
        assert_eq!(rows.len(), 12);
        assert!(rows
            .iter()
            .all(|v| v.config.fusion.perspectives.count() == 1));
    }

    #[test]
    fn violations_compare_within_column() {
        let row = |label: &str, acc: f64| AblationRow {
            label: label.into(),
            column: "MPFN".into(),
            dev_acc: vec![acc],
            reference: None,
        };
        let rows = [
            row("U", 0.8),
            row("D", 0.7),
            row("DU", 0.75),
            row("SD", 0.65),
        ];
        assert_eq!(ordering_violations(&rows), ["MPFN/SD"]);
        assert!(report(&rows).contains("MPFN\tDU\t75.00"));
    }
}
