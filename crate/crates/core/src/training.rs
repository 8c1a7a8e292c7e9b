//! Adam, the epoch loop with early stopping, and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mode::Mode;
use crate::model::{Example, Model, Prediction};
use crate::tensor::{Gradients, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub emb_dropout: f64,
    pub rnn_dropout: f64,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without a new best dev accuracy.
    pub patience: usize,
    pub seed: u64,
    /// Rescale the batch gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
    /// Worker threads for per-instance gradients; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            emb_dropout: 0.386,
            rnn_dropout: 0.40,
            max_epochs: 30,
            patience: 10,
            seed: 1,
            clip_norm: None,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("embedding dropout", self.emb_dropout)?;
        unit("encoder dropout", self.rnn_dropout)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Adam moments for every trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T: Real = f64> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

/// One bias-corrected Adam update. Frozen tensors are skipped; a trainable
/// tensor without a gradient is an internal error.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (name, tensor) in params.iter_mut() {
        if !tensor.requires_grad() {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| {
            Error::Internal(format!("no gradient for trainable parameter {name}"))
        })?;
        let n = tensor.numel();
        if g.len() != n {
            return Err(Error::Internal(format!(
                "gradient of {name} has {} values, expected {n}",
                g.len()
            )));
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        for (((p, &gi), mi), vi) in tensor
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean negative log probability of the true choice.
pub fn cross_entropy(predictions: &[Prediction], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p.probs[y].ln())
        .sum();
    Ok(total / predictions.len() as f64)
}

fn global_norm<T: Real>(grads: &Gradients<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Fraction of labelled examples whose argmax matches the label.
pub fn evaluate<T: Real>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let correct = examples
        .par_iter()
        .map(|ex| {
            let label = ex.require_label()?;
            Ok(usize::from(model.predict(ex)?.label == label))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub dev_acc: f64,
    pub seconds: f64,
}

/// Per-epoch metrics, written as tab-separated text with a header row:
/// `epoch train_loss train_acc dev_acc seconds`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub epochs: Vec<EpochRecord>,
}

impl MetricTrace {
    pub const HEADER: &'static str = "epoch\ttrain_loss\ttrain_acc\tdev_acc\tseconds";

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.3}",
                r.epoch, r.train_loss, r.train_acc, r.dev_acc, r.seconds
            );
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Parse {
                location: "trace line 1".into(),
                message: "missing header".into(),
            });
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |m: String| Error::Parse {
                location: format!("trace line {}", i + 2),
                message: m,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| err(format!("bad number {s:?}: {e}")))
            };
            epochs.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|e| err(format!("bad epoch {:?}: {e}", f[0])))?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                dev_acc: num(f[3])?,
                seconds: num(f[4])?,
            });
        }
        Ok(MetricTrace { epochs })
    }

    /// Same records ignoring wall-clock time.
    pub fn same_metrics(&self, other: &MetricTrace) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss == b.train_loss
                    && a.train_acc == b.train_acc
                    && a.dev_acc == b.dev_acc
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real = f64> {
    /// Parameters from the epoch with the best dev accuracy.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub trace: MetricTrace,
}

fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Internal(format!("building thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Examples per gradient accumulator. Chunks run in parallel and are summed
/// in order, so results do not depend on the number of threads.
const CHUNK: usize = 8;

/// Mean gradient and summed loss over one batch. Each example draws its
/// dropout masks from its own stream.
fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[(u64, &Example)],
    cfg: &TrainConfig,
) -> Result<(f64, Gradients<T>)> {
    let chunks = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Gradients::new();
            let mut loss = 0.0;
            for &(stream, ex) in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream);
                let mut mode = Mode::Train {
                    emb_dropout: cfg.emb_dropout,
                    rnn_dropout: cfg.rnn_dropout,
                    rng: &mut rng,
                };
                loss += model.accumulate_gradients(ex, &mut mode, &mut acc)?.0;
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chunks = chunks.into_iter();
    let (mut loss, mut total) = chunks.next().unwrap_or_default();
    for (l, grads) in chunks {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let scale = T::lit(1.0 / batch.len() as f64);
    total
        .values_mut()
        .flat_map(|g| g.iter_mut())
        .for_each(|x| *x *= scale);
    Ok((loss, total))
}

/// Trains `model` on `train`, selecting the parameters with the best dev
/// accuracy.
pub fn train<T: Real>(
    mut model: Model<T>,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Usage("dev split is empty".into()));
    }
    for ex in train.iter().chain(dev) {
        ex.require_label()?;
    }
    let threads = cfg.threads;
    with_pool(threads, move || {
        let mut state = OptimizerState::<T>::default();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut trace = MetricTrace::default();
        let mut best = model.params.clone();
        let mut best_epoch = 0;
        let mut best_dev = f64::NEG_INFINITY;
        let mut since_best = 0;
        let mut stream = 0u64;

        for epoch in 1..=cfg.max_epochs {
            let start = Instant::now();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(u64, &Example)> = chunk
                    .iter()
                    .map(|&i| {
                        stream += 1;
                        (stream, &train[i])
                    })
                    .collect();
                let (loss, mut grads) = batch_gradients(&model, &batch, cfg)?;
                loss_sum += loss;
                if let Some(max) = cfg.clip_norm {
                    let norm = global_norm(&grads);
                    if norm > max {
                        let s = T::lit(max / norm);
                        grads
                            .values_mut()
                            .flat_map(|g| g.iter_mut())
                            .for_each(|x| *x *= s);
                    }
                }
                adam_step(&mut model.params, &grads, &mut state, cfg)?;
            }
            let train_acc = evaluate(&model, train)?;
            let dev_acc = evaluate(&model, dev)?;
            let record = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_acc,
                dev_acc,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: loss {:.4} train {:.4} dev {:.4} ({:.1}s)",
                record.train_loss,
                train_acc,
                dev_acc,
                record.seconds
            );
            trace.epochs.push(record);
            if dev_acc > best_dev {
                best_dev = dev_acc;
                best_epoch = epoch;
                best = model.params.clone();
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= cfg.patience {
                break;
            }
        }
        model.params = best;
        Ok(TrainOutcome {
            best: model,
            best_epoch,
            best_dev_acc: best_dev,
            trace,
        })
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "x",
            Tensor::from_vec(vec![1], vec![v])
                .unwrap()
                .with_requires_grad(true),
        )
        .unwrap();
        s.insert("frozen", Tensor::from_vec(vec![1], vec![3.0]).unwrap())
            .unwrap();
        s
    }

    fn grads(g: f64) -> Gradients<f64> {
        BTreeMap::from([("x".to_string(), vec![g])])
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::default();
        let cfg = TrainConfig::default();
        adam_step(&mut p, &grads(1.0), &mut st, &cfg).unwrap();
        let x = p.get("x").unwrap().data()[0];
        assert!((x + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{x}");
        assert_eq!(p.get("frozen").unwrap().data(), &[3.0]);
    }

    #[test]
    fn adam_zero_gradient_and_sign_limit() {
        let cfg = TrainConfig::default();
        let mut p = scalar_store(0.5);
        let mut st = OptimizerState::default();
        adam_step(&mut p, &grads(0.0), &mut st, &cfg).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.5]);
        assert_eq!(st.step, 1);

        for _ in 0..2000 {
            adam_step(&mut p, &grads(-0.3), &mut st, &cfg).unwrap();
        }
        let before = p.get("x").unwrap().data()[0];
        adam_step(&mut p, &grads(-0.3), &mut st, &cfg).unwrap();
        let step = p.get("x").unwrap().data()[0] - before;
        assert!((step - 1e-3).abs() < 1e-5, "{step}");
    }

    #[test]
    fn adam_missing_gradient() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::default();
        let err =
            adam_step(&mut p, &BTreeMap::new(), &mut st, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Prediction::from_scores([0.0, 0.0], crate::model::OutputMode::Softmax);
        assert!((cross_entropy(&[uniform], &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let sure = Prediction::from_scores([40.0, 0.0], crate::model::OutputMode::Softmax);
        assert!(cross_entropy(&[sure], &[0]).unwrap() < 1e-15);
        let l1 = cross_entropy(&[sure], &[1]).unwrap();
        let both = cross_entropy(&[sure, uniform], &[1, 0]).unwrap();
        assert!((both - (l1 + 2f64.ln()) / 2.0).abs() < 1e-12);
        assert!(cross_entropy(&[], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            emb_dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trace_round_trip() {
        let trace = MetricTrace {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: std::f64::consts::LN_2,
                train_acc: 0.5,
                dev_acc: 0.625,
                seconds: 1.25,
            }],
        };
        let back = MetricTrace::parse_tsv(&trace.to_tsv()).unwrap();
        assert_eq!(back, trace);
    }
}
