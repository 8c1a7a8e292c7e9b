use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mpfn::ablation::{self, AblationData, Variant};
use mpfn::checkpoint::{self, Metadata};
use mpfn::data::{
    self, synthetic_corpus, Corpus, CorpusMeta, Format, Instance, Split, SyntheticConfig,
};
use mpfn::export::{export_fusion, write_exports, FusionInput};
use mpfn::features::{FreqTable, RelationLexicon};
use mpfn::fusion::{FusionConfig, Perspectives, PostAggregation};
use mpfn::gradcheck::suite::{render, run_suite, SuiteConfig};
use mpfn::gradcheck::CheckConfig;
use mpfn::model::{vote, Example, Model, ModelConfig, OutputMode, Prediction};
use mpfn::pipeline::{self, ResourceSet, SYNTH_VECTOR_SCALE};
use mpfn::tensor::{OpKind, Real};
use mpfn::training::{train, MetricTrace, TrainConfig};
use mpfn::{Error, Result};
use serde_json::json;

use crate::args::*;
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "trace.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Worker bound from `MPFN_THREADS`, if set.
pub fn env_threads() -> Result<Option<usize>> {
    match std::env::var("MPFN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "MPFN_THREADS must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn parse_sizes(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::Usage(format!(
                "--synth-sizes wants three counts like 256,64,0, got {s:?}"
            ))
        })?;
    <[usize; 3]>::try_from(parts).map_err(|_| {
        Error::Usage(format!(
            "--synth-sizes wants three counts like 256,64,0, got {s:?}"
        ))
    })
}

fn is_synth(d: &DataArgs) -> bool {
    d.corpus == "synth"
}

pub fn load_corpus(d: &DataArgs, single_split: Split) -> Result<Corpus> {
    if is_synth(d) {
        return synthetic_corpus(
            parse_sizes(&d.synth_sizes)?,
            d.synth_vocab,
            d.data_seed,
            SyntheticConfig::default(),
        );
    }
    let path = PathBuf::from(&d.corpus);
    let format = d.format.map(|f| match f {
        FormatArg::Jsonl => Format::Jsonl,
        FormatArg::Xml => Format::Xml,
    });
    if path.is_file() {
        let mut corpus = Corpus::default();
        *corpus.split_mut(single_split) =
            data::load_split_file(&path, format, &CorpusMeta::default())?;
        return Ok(corpus);
    }
    if !path.exists() {
        return Err(Error::io(
            format!("opening corpus {}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    let format = match format {
        Some(f) => f,
        None => [Format::Jsonl, Format::Xml]
            .into_iter()
            .find(|&f| {
                Split::ALL
                    .iter()
                    .any(|&s| data::split_path(&path, s, f).exists())
            })
            .ok_or_else(|| {
                Error::Usage(format!(
                    "no train/dev/test .jsonl or .xml files in {}",
                    path.display()
                ))
            })?,
    };
    data::load_corpus(&path, format)
}

pub fn load_resources(d: &DataArgs) -> Result<ResourceSet> {
    let mut r = ResourceSet {
        embeddings: d.embeddings.clone(),
        ..ResourceSet::default()
    };
    r.random_scale = match d.vector_scale {
        Some(s) => s,
        None if is_synth(d) => SYNTH_VECTOR_SCALE,
        None => r.random_scale,
    };
    if let Some(p) = &d.freq_table {
        r.freq = Some(FreqTable::load(p)?);
    }
    if let Some(p) = &d.relations {
        r.relations = RelationLexicon::load(p, true)?;
    }
    if let Some(dir) = &d.tags {
        r.sidecars_from_dir(dir)?;
    }
    Ok(r)
}

pub fn model_config(m: &ModelArgs) -> Result<ModelConfig> {
    let perspectives: Perspectives = m.perspectives.parse()?;
    let post_aggregation: PostAggregation = m.post_agg.parse()?;
    let output: OutputMode = m.output.parse()?;
    let mut cfg = ModelConfig {
        fusion: FusionConfig {
            perspectives,
            post_aggregation,
            fnn_hidden: m.hidden,
            ..FusionConfig::default()
        },
        hidden: m.hidden,
        output,
        ..ModelConfig::default()
    };
    cfg.dims.word = m.word_dim;
    cfg.dims.attn = m.hidden;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(o: &OptimArgs, threads: Option<usize>) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        batch_size: o.batch_size,
        lr: o.lr,
        max_epochs: o.epochs,
        patience: o.patience,
        seed: o.seed,
        clip_norm: o.clip_norm,
        threads,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn labeled(split: &[Example], what: Split) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Usage(format!("the {what} split is empty")));
    }
    split.iter().try_for_each(|e| e.require_label().map(|_| ()))
}

pub struct TrainResult {
    pub best_dev_acc: f64,
    pub best_epoch: usize,
    pub trace: MetricTrace,
}

fn train_and_save<T: Real>(
    model: Model<f64>,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    metadata: &mut Metadata,
    out: &Path,
) -> Result<TrainResult> {
    let outcome = train(model.cast::<T>(), train_set, dev_set, cfg)?;
    metadata.insert("best_epoch".into(), json!(outcome.best_epoch));
    metadata.insert("best_dev_acc".into(), json!(outcome.best_dev_acc));
    checkpoint::save(&outcome.best, metadata, &out.join(CHECKPOINT_FILE))?;
    Ok(TrainResult {
        best_dev_acc: outcome.best_dev_acc,
        best_epoch: outcome.best_epoch,
        trace: outcome.trace,
    })
}

pub fn cmd_train(cmd: &TrainCmd) -> Result<TrainResult> {
    let threads = env_threads()?;
    let config = model_config(&cmd.model)?;
    let train_cfg = train_config(&cmd.optim, threads)?;
    let corpus = load_corpus(&cmd.data, Split::Train)?;
    let resources = load_resources(&cmd.data)?;
    let prepared = pipeline::prepare(&corpus, &resources, config.dims.word, cmd.data.data_seed)?;
    if cmd.data.embeddings.is_some() {
        log::info!(
            "{} of {} vocabulary rows found in the embedding file",
            prepared.vectors_found,
            prepared.vocabs.words.len()
        );
    }
    let train_set = prepared.split(Split::Train);
    let dev_set = prepared.split(Split::Dev);
    labeled(train_set, Split::Train)?;
    labeled(dev_set, Split::Dev)?;
    let model = Model::<f64>::new(
        config,
        prepared.vocabs.clone(),
        &prepared.word_table,
        cmd.optim.seed,
    )?;

    fs::create_dir_all(&cmd.out)
        .map_err(|e| Error::io(format!("creating {}", cmd.out.display()), e))?;
    let mut metadata = Metadata::new();
    metadata.insert("seed".into(), json!(cmd.optim.seed));
    metadata.insert("data_seed".into(), json!(cmd.data.data_seed));
    metadata.insert("precision".into(), json!(cmd.optim.precision));
    let result = match cmd.optim.precision {
        Precision::F64 => train_and_save::<f64>(
            model,
            train_set,
            dev_set,
            &train_cfg,
            &mut metadata,
            &cmd.out,
        )?,
        Precision::F32 => train_and_save::<f32>(
            model,
            train_set,
            dev_set,
            &train_cfg,
            &mut metadata,
            &cmd.out,
        )?,
    };
    write_file(&cmd.out.join(TRACE_FILE), result.trace.to_tsv())?;
    let manifest = RunManifest::new(cmd.clone(), config, train_cfg, corpus.sizes(), threads);
    write_file(&cmd.out.join(MANIFEST_FILE), manifest.to_json()?)?;
    println!(
        "best dev accuracy {:.4} at epoch {} ({} epochs run); wrote {}",
        result.best_dev_acc,
        result.best_epoch,
        result.trace.epochs.len(),
        cmd.out.display()
    );
    Ok(result)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Dev => Split::Dev,
        SplitArg::Test => Split::Test,
    }
}

/// Examples of `split` annotated against the vocabularies of `model`.
fn examples_for(
    model: &Model<f64>,
    corpus: &Corpus,
    d: &DataArgs,
    split: Split,
) -> Result<Vec<Example>> {
    let resources = load_resources(d)?;
    let mut splits = pipeline::annotate(corpus, &resources, &model.vocabs, d.data_seed)?;
    Ok(splits.remove(&split).unwrap_or_default())
}

fn predictions_tsv(
    instances: &[Instance],
    preds: &[Prediction],
    votes: Option<&[usize]>,
) -> String {
    let mut out = String::from("id\tpredicted\tprob0\tprob1\tlabel\n");
    for (i, (inst, p)) in instances.iter().zip(preds).enumerate() {
        let predicted = votes.map_or(p.label, |v| v[i]);
        let label = inst
            .label
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        let _ = writeln!(
            out,
            "{}\t{predicted}\t{:.6}\t{:.6}\t{label}",
            inst.id, p.probs[0], p.probs[1]
        );
    }
    out
}

fn accuracy(instances: &[Instance], predicted: &[usize]) -> Option<f64> {
    if instances.is_empty() || instances.iter().any(|i| i.label.is_none()) {
        return None;
    }
    let right = instances
        .iter()
        .zip(predicted)
        .filter(|(i, &p)| i.label == Some(p))
        .count();
    Some(right as f64 / instances.len() as f64)
}

fn report_accuracy(split: Split, n: usize, acc: Option<f64>) -> Option<f64> {
    match acc {
        Some(a) => println!("{split} accuracy {a:.4} over {n} instances"),
        None => println!("{split}: {n} instances, labels absent, predictions only"),
    }
    acc
}

pub fn cmd_evaluate(cmd: &EvaluateCmd) -> Result<Option<f64>> {
    if !cmd.ensemble.is_empty() {
        return cmd_ensemble(&EnsembleCmd {
            data: cmd.data.clone(),
            ensemble: cmd.ensemble.clone(),
            split: cmd.split,
            out: cmd.out.clone(),
        });
    }
    let path = cmd
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluate needs --checkpoint or --ensemble".into()))?;
    let split = split_of(cmd.split);
    let corpus = load_corpus(&cmd.data, split)?;
    let (model, _) = checkpoint::load::<f64>(path)?;
    let examples = examples_for(&model, &corpus, &cmd.data, split)?;
    if examples.is_empty() {
        return Err(Error::Usage(format!("the {split} split is empty")));
    }
    let preds = examples
        .iter()
        .map(|e| model.predict(e))
        .collect::<Result<Vec<_>>>()?;
    let instances = corpus.split(split);
    if let Some(out) = &cmd.out {
        write_file(out, predictions_tsv(instances, &preds, None))?;
    }
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    Ok(report_accuracy(
        split,
        instances.len(),
        accuracy(instances, &labels),
    ))
}

pub fn cmd_ensemble(cmd: &EnsembleCmd) -> Result<Option<f64>> {
    if cmd.ensemble.is_empty() {
        return Err(Error::Usage(
            "--ensemble needs at least one checkpoint".into(),
        ));
    }
    let split = split_of(cmd.split);
    let corpus = load_corpus(&cmd.data, split)?;
    let instances = corpus.split(split);
    if instances.is_empty() {
        return Err(Error::Usage(format!("the {split} split is empty")));
    }
    // members may carry different vocabularies, so each annotates on its own
    let mut per_member: Vec<Vec<Prediction>> = Vec::new();
    for path in &cmd.ensemble {
        let (model, _) = checkpoint::load::<f64>(path)?;
        let examples = examples_for(&model, &corpus, &cmd.data, split)?;
        per_member.push(
            examples
                .iter()
                .map(|e| model.predict(e))
                .collect::<Result<_>>()?,
        );
    }
    let mut votes = Vec::with_capacity(instances.len());
    let mut mean_preds = Vec::with_capacity(instances.len());
    for i in 0..instances.len() {
        let members: Vec<Prediction> = per_member.iter().map(|m| m[i]).collect();
        let v = vote(&members)?;
        let n = members.len() as f64;
        let probs = [v.prob_sums[0] / n, v.prob_sums[1] / n];
        mean_preds.push(Prediction {
            scores: [probs[0].ln(), probs[1].ln()],
            probs,
            label: v.label,
        });
        votes.push(v.label);
    }
    if let Some(out) = &cmd.out {
        write_file(out, predictions_tsv(instances, &mean_preds, Some(&votes)))?;
    }
    println!("{} members voting", cmd.ensemble.len());
    Ok(report_accuracy(
        split,
        instances.len(),
        accuracy(instances, &votes),
    ))
}

pub fn cmd_ablate(cmd: &AblateCmd) -> Result<Vec<ablation::AblationRow>> {
    if cmd.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let threads = env_threads()?;
    let base = model_config(&cmd.model)?;
    let train_cfg = train_config(&cmd.optim, None)?;
    let corpus = load_corpus(&cmd.data, Split::Train)?;
    let resources = load_resources(&cmd.data)?;
    let prepared = pipeline::prepare(&corpus, &resources, base.dims.word, cmd.data.data_seed)?;
    labeled(prepared.split(Split::Train), Split::Train)?;
    labeled(prepared.split(Split::Dev), Split::Dev)?;

    let mut variants: Vec<Variant> = Vec::new();
    if matches!(cmd.study, Study::Perspectives | Study::All) {
        variants.extend(ablation::perspective_sweep(&base, cmd.with_birnn));
    }
    if matches!(cmd.study, Study::Inputs | Study::All) {
        variants.extend(ablation::input_ablation(&base));
    }
    if matches!(cmd.study, Study::Interaction | Study::All) {
        variants.extend(ablation::interaction_grid(&base));
    }
    let seeds: Vec<u64> = (0..cmd.seeds as u64).map(|k| cmd.optim.seed + k).collect();
    let workers =
        threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let data = AblationData {
        vocabs: &prepared.vocabs,
        word_table: &prepared.word_table,
        train: prepared.split(Split::Train),
        dev: prepared.split(Split::Dev),
    };
    let rows = ablation::run(&variants, data, &train_cfg, &seeds, workers)?;
    let text = ablation::report(&rows);
    fs::create_dir_all(&cmd.out)
        .map_err(|e| Error::io(format!("creating {}", cmd.out.display()), e))?;
    write_file(&cmd.out.join("ablation.tsv"), &text)?;
    write_file(
        &cmd.out.join("ablation.json"),
        serde_json::to_string_pretty(
            &json!({ "study": cmd.study, "seeds": seeds, "rows": rows, "args": cmd }),
        )
        .map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    print!("{text}");
    println!("reference_mcscript: published test accuracy on the full MCScript corpus, shown for orientation only");
    if matches!(cmd.study, Study::Perspectives | Study::All) {
        let sweep: Vec<_> = rows
            .iter()
            .filter(|r| r.column == "MPFN" || r.column == "+BiLSTM")
            .cloned()
            .collect();
        let sweep: Vec<_> = sweep
            .into_iter()
            .filter(|r| r.label.chars().all(|c| "SDU".contains(c)))
            .collect();
        let bad = ablation::ordering_violations(&sweep);
        if bad.is_empty() {
            println!(
                "ordering: every multi-perspective row is at or above the worst single perspective"
            );
        } else {
            println!(
                "ordering: below the worst single perspective: {}",
                bad.join(", ")
            );
        }
    }
    Ok(rows)
}

pub fn cmd_gradcheck(cmd: &GradcheckCmd) -> Result<bool> {
    let fault = cmd
        .inject_fault
        .as_deref()
        .map(str::parse::<OpKind>)
        .transpose()?;
    let cfg = SuiteConfig {
        check: CheckConfig {
            step: cmd.step,
            tolerance: cmd.tolerance,
            ..CheckConfig::default()
        },
        full_width: cmd.full_width,
        full_width_coords: cmd.coords,
        fault,
    };
    let outcomes = run_suite(&cfg)?;
    print!("{}", render(&outcomes, cmd.tolerance));
    Ok(outcomes.iter().all(|o| o.passed))
}

pub fn cmd_export(cmd: &ExportCmd) -> Result<Vec<PathBuf>> {
    let (model, _) = checkpoint::load::<f64>(&cmd.checkpoint)?;
    let corpus = load_corpus(&cmd.data, Split::Dev)?;
    let split = Split::ALL
        .into_iter()
        .find(|&s| corpus.split(s).iter().any(|i| i.id == cmd.instance))
        .ok_or_else(|| {
            Error::Lookup(format!(
                "no instance with id {:?} in the corpus",
                cmd.instance
            ))
        })?;
    let idx = corpus
        .split(split)
        .iter()
        .position(|i| i.id == cmd.instance)
        .expect("found above");
    let examples = examples_for(&model, &corpus, &cmd.data, split)?;
    let input = if cmd.self_fusion {
        FusionInput::SelfPassage
    } else {
        FusionInput::Attended
    };
    let exports = export_fusion(&model, &examples[idx], &corpus.split(split)[idx], input)?;
    let written = write_exports(&exports, &cmd.out)?;
    println!("wrote {} matrices to {}", written.len(), cmd.out.display());
    Ok(written)
}

pub fn cmd_synth(cmd: &SynthCmd) -> Result<()> {
    if !is_synth(&cmd.data) {
        return Err(Error::Usage(
            "synth writes a generated corpus; leave --corpus at synth".into(),
        ));
    }
    let corpus = load_corpus(&cmd.data, Split::Train)?;
    let format = match cmd.write_format {
        FormatArg::Jsonl => Format::Jsonl,
        FormatArg::Xml => Format::Xml,
    };
    data::save_corpus(&corpus, &cmd.out, format)?;
    let resources = load_resources(&cmd.data)?;
    let prepared = pipeline::prepare(&corpus, &resources, 300, cmd.data.data_seed)?;
    let vectors = cmd.out.join("vectors.txt");
    let mut text = String::new();
    for (id, token) in prepared.vocabs.words.tokens().iter().enumerate().skip(2) {
        text.push_str(token);
        for v in prepared.word_table.row(id) {
            let _ = write!(text, " {v}");
        }
        text.push('\n');
    }
    write_file(&vectors, text)?;
    let [a, b, c] = corpus.sizes();
    println!(
        "wrote {a}/{b}/{c} instances and {} to {}",
        vectors.display(),
        cmd.out.display()
    );
    Ok(())
}

pub fn cmd_replay(cmd: &ReplayCmd) -> Result<bool> {
    let text = fs::read_to_string(&cmd.manifest)
        .map_err(|e| Error::io(format!("reading {}", cmd.manifest.display()), e))?;
    let manifest = RunManifest::from_json(&text)?;
    let original_trace = cmd
        .manifest
        .parent()
        .map(|d| d.join(TRACE_FILE))
        .filter(|p| p.is_file());
    let mut train_cmd = manifest.train.clone();
    train_cmd.out = cmd.out.clone();
    let result = cmd_train(&train_cmd)?;
    match original_trace {
        Some(p) => {
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            let same = MetricTrace::parse_tsv(&text)?.same_metrics(&result.trace);
            println!(
                "replay {} the recorded trace {}",
                if same { "matches" } else { "DIFFERS from" },
                p.display()
            );
            Ok(same)
        }
        None => {
            println!("no recorded trace next to the manifest; replay finished without comparison");
            Ok(true)
        }
    }
}
