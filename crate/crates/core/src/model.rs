//! The full scorer: embeddings, encoders, fusion and self-attention pooling,
//! plus the two-choice predictor built on top of it.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::features::{self, AnnotatedToken, EmbeddingDims, InputConfig, Role, Vocabs};
use crate::fusion::{self, FusionConfig, FusionOutput};
use crate::mode::Mode;
use crate::tensor::{Gradients, Graph, ParamStore, Real, Tensor, Var};

pub const ENC_PASSAGE: &str = "enc.passage";
pub const ENC_QUESTION: &str = "enc.question";
pub const ENC_CHOICE: &str = "enc.choice";
pub const SELF_ATTN: &str = "out.attn.w";
pub const SCORE_W: &str = "out.score.w";
pub const SCORE_B: &str = "out.score.b";

/// How the two choice scores become probabilities and a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    /// Softmax over the pair, cross-entropy on the true choice.
    Softmax,
    /// Independent sigmoid per choice with binary cross-entropy; the two
    /// sigmoids are renormalised to a distribution for prediction.
    Sigmoid,
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(OutputMode::Softmax),
            "sigmoid" => Ok(OutputMode::Sigmoid),
            other => Err(Error::Usage(format!("unknown output mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: EmbeddingDims,
    pub inputs: InputConfig,
    pub fusion: FusionConfig,
    /// Hidden size of each encoder direction.
    pub hidden: usize,
    /// Encode questions with the passage encoder.
    pub share_pq_encoder: bool,
    pub output: OutputMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: EmbeddingDims::default(),
            inputs: InputConfig::default(),
            fusion: FusionConfig::default(),
            hidden: 123,
            share_pq_encoder: false,
            output: OutputMode::Softmax,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("encoder hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        2 * self.hidden
    }

    pub fn global_width(&self) -> usize {
        self.fusion.output_width()
    }

    fn question_encoder(&self) -> &'static str {
        if self.share_pq_encoder {
            ENC_PASSAGE
        } else {
            ENC_QUESTION
        }
    }
}

/// One instance with every token mapped to feature ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub passage: Vec<AnnotatedToken>,
    pub question: Vec<AnnotatedToken>,
    pub choices: Vec<Vec<AnnotatedToken>>,
    pub label: Option<usize>,
}

impl Example {
    fn check(&self) -> Result<()> {
        if self.choices.len() != 2 {
            return Err(Error::Data(format!(
                "instance {} has {} choices, expected 2",
                self.id,
                self.choices.len()
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Data(format!("instance {} has label {l}", self.id)));
            }
        }
        Ok(())
    }

    pub fn require_label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::Usage(format!("instance {} has no label", self.id)))
    }
}

/// Tape handles for one scored choice.
#[derive(Debug, Clone)]
pub struct ChoiceTrace {
    pub context: Var,
    pub aware_passage: Var,
    pub aware_question: Var,
    /// Word-level attention over passage and question words, when enabled.
    pub word_alpha_passage: Option<Var>,
    pub word_alpha_question: Option<Var>,
    pub beta_passage: Var,
    pub beta_question: Var,
    pub fusion: FusionOutput,
    /// Self-attention weights `1 × |c|`.
    pub pool: Var,
    pub score: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `1 × 2` choice scores.
    pub scores: Var,
    pub choices: Vec<ChoiceTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub scores: [f64; 2],
    pub probs: [f64; 2],
    pub label: usize,
}

impl Prediction {
    pub fn from_scores(scores: [f64; 2], mode: OutputMode) -> Self {
        let probs = match mode {
            OutputMode::Softmax => {
                let d = scores[1] - scores[0];
                [1.0 / (1.0 + d.exp()), 1.0 / (1.0 + (-d).exp())]
            }
            OutputMode::Sigmoid => {
                let s = scores.map(|x| 1.0 / (1.0 + (-x).exp()));
                let total = s[0] + s[1];
                if total > 0.0 {
                    [s[0] / total, s[1] / total]
                } else {
                    [0.5, 0.5]
                }
            }
        };
        let label = usize::from(probs[1] > probs[0]);
        Prediction {
            scores,
            probs,
            label,
        }
    }
}

/// Outcome of a majority vote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub label: usize,
    pub votes: [usize; 2],
    pub prob_sums: [f64; 2],
}

/// Majority vote; ties go to the larger summed probability, then to choice 0.
pub fn vote(members: &[Prediction]) -> Result<Vote> {
    if members.is_empty() {
        return Err(Error::Usage("ensemble needs at least one member".into()));
    }
    let mut votes = [0usize; 2];
    let mut prob_sums = [0.0; 2];
    for m in members {
        votes[m.label] += 1;
        prob_sums[0] += m.probs[0];
        prob_sums[1] += m.probs[1];
    }
    let label = match votes[0].cmp(&votes[1]) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => usize::from(prob_sums[1] > prob_sums[0]),
    };
    Ok(Vote {
        label,
        votes,
        prob_sums,
    })
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f64> {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters. `word_table` must have one row per word in `vocabs`.
    pub fn new(
        config: ModelConfig,
        vocabs: Vocabs,
        word_table: &Tensor<f64>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        features::init_params(
            &mut params,
            &vocabs,
            word_table,
            &config.dims,
            &config.inputs,
            &mut rng,
        )?;
        let ctx_in = config.inputs.context_width(&config.dims);
        let h = config.hidden;
        encoder::init_params(&mut params, ENC_PASSAGE, ctx_in, h, &mut rng)?;
        if !config.share_pq_encoder {
            encoder::init_params(&mut params, ENC_QUESTION, ctx_in, h, &mut rng)?;
        }
        encoder::init_params(
            &mut params,
            ENC_CHOICE,
            config.inputs.choice_width(&config.dims),
            h,
            &mut rng,
        )?;
        fusion::init_params(
            &mut params,
            &config.fusion,
            config.context_width(),
            &mut rng,
        )?;
        let g = config.global_width();
        params.insert(
            SELF_ATTN,
            Tensor::xavier(g, 1, &mut rng)?.with_requires_grad(true),
        )?;
        params.insert(
            SCORE_W,
            Tensor::xavier(g, 1, &mut rng)?.with_requires_grad(true),
        )?;
        params.insert(SCORE_B, Tensor::zeros(vec![1])?.with_requires_grad(true))?;
        Ok(Model {
            config,
            vocabs,
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            vocabs: self.vocabs.clone(),
            params: self.params.cast(),
        }
    }

    /// Scores both choices of `ex` on `graph`. Passage and question are
    /// encoded once and shared by the two choices.
    pub fn forward(
        &self,
        graph: &mut Graph<'_, T>,
        ex: &Example,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        ex.check()?;
        let cfg = &self.config;
        let passage =
            features::lookup_sequence(graph, &ex.passage, Role::Passage, &cfg.inputs, mode)?;
        let question =
            features::lookup_sequence(graph, &ex.question, Role::Question, &cfg.inputs, mode)?;
        let p_ctx = encoder::encode(graph, ENC_PASSAGE, passage.full)?;
        let p_ctx = rnn_dropout(graph, p_ctx, mode)?;
        let q_ctx = encoder::encode(graph, cfg.question_encoder(), question.full)?;
        let q_ctx = rnn_dropout(graph, q_ctx, mode)?;

        let mut choices = Vec::with_capacity(2);
        for tokens in &ex.choices {
            choices.push(self.score_choice(
                graph,
                tokens,
                (passage.words, p_ctx),
                (question.words, q_ctx),
                mode,
            )?);
        }
        let scores = graph
            .tape
            .concat(&[choices[0].score, choices[1].score], 1)?;
        Ok(Forward { scores, choices })
    }

    fn score_choice(
        &self,
        graph: &mut Graph<'_, T>,
        tokens: &[AnnotatedToken],
        (p_words, p_ctx): (Var, Var),
        (q_words, q_ctx): (Var, Var),
        mode: &mut Mode<'_>,
    ) -> Result<ChoiceTrace> {
        let cfg = &self.config;
        let choice = features::lookup_sequence(graph, tokens, Role::Choice, &cfg.inputs, mode)?;
        let mut aware = [None, None];
        let mut alphas = [None, None];
        for (slot, (on, other, passage)) in [
            (cfg.inputs.choice_passage, p_words, true),
            (cfg.inputs.choice_question, q_words, false),
        ]
        .into_iter()
        .enumerate()
        {
            if on {
                let w = graph.param(features::attention_param(&cfg.inputs, passage))?;
                let (att, alpha) = features::word_level_attention(graph, choice.words, other, w)?;
                aware[slot] = Some(att);
                alphas[slot] = Some(alpha);
            }
        }
        let composed = features::compose_choice(graph, choice.words, aware[0], aware[1])?;
        let c_ctx = encoder::encode(graph, ENC_CHOICE, composed)?;
        let c_ctx = rnn_dropout(graph, c_ctx, mode)?;

        let (cp, beta_p) = fusion::context_attention(graph, c_ctx, p_ctx)?;
        let (cq, beta_q) = fusion::context_attention(graph, c_ctx, q_ctx)?;
        let fused = fusion::global_representation(graph, c_ctx, cp, cq, &cfg.fusion)?;

        let (pool, r) = self_attention_pool(graph, fused.global)?;
        let w = graph.param(SCORE_W)?;
        let b = graph.param(SCORE_B)?;
        let s = graph.tape.matmul(r, w)?;
        let score = graph.tape.add_row(s, b)?;
        Ok(ChoiceTrace {
            context: c_ctx,
            aware_passage: cp,
            aware_question: cq,
            word_alpha_passage: alphas[0],
            word_alpha_question: alphas[1],
            beta_passage: beta_p,
            beta_question: beta_q,
            fusion: fused,
            pool,
            score,
        })
    }

    /// Training objective for one example.
    pub fn loss(&self, graph: &mut Graph<'_, T>, fwd: &Forward, label: usize) -> Result<Var> {
        if label > 1 {
            return Err(Error::Data(format!("label {label} is not 0 or 1")));
        }
        let tape = &mut graph.tape;
        match self.config.output {
            OutputMode::Softmax => {
                let logp = tape.log_softmax(fwd.scores, 1)?;
                let picked = tape.slice(logp, 1, label, 1)?;
                let nll = tape.scale(picked, -T::one())?;
                tape.sum(nll)
            }
            OutputMode::Sigmoid => {
                // -log σ(s_true) - log(1 - σ(s_false))
                let mut sign = vec![T::one(); 2];
                sign[label] = -T::one();
                let signed = tape.mul_const(fwd.scores, sign)?;
                let terms = tape.softplus(signed)?;
                tape.sum(terms)
            }
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let mut graph = Graph::new(&self.params);
        let fwd = self.forward(&mut graph, ex, &mut Mode::Eval)?;
        let v = graph.tape.value(fwd.scores);
        Ok(Prediction::from_scores(
            [v[0].as_f64(), v[1].as_f64()],
            self.config.output,
        ))
    }

    /// Loss value, parameter gradients and the prediction made on the way.
    pub fn gradients(
        &self,
        ex: &Example,
        mode: &mut Mode<'_>,
    ) -> Result<(f64, Gradients<T>, Prediction)> {
        let mut grads = Gradients::new();
        let (loss, pred) = self.accumulate_gradients(ex, mode, &mut grads)?;
        Ok((loss, grads, pred))
    }

    /// Adds this example's parameter gradients into `acc`.
    pub fn accumulate_gradients(
        &self,
        ex: &Example,
        mode: &mut Mode<'_>,
        acc: &mut Gradients<T>,
    ) -> Result<(f64, Prediction)> {
        let label = ex.require_label()?;
        let mut graph = Graph::new(&self.params);
        let fwd = self.forward(&mut graph, ex, mode)?;
        let v = graph.tape.value(fwd.scores);
        let pred = Prediction::from_scores([v[0].as_f64(), v[1].as_f64()], self.config.output);
        let loss = self.loss(&mut graph, &fwd, label)?;
        let value = graph.tape.scalar(loss).as_f64();
        graph.accumulate_gradients(loss, acc)?;
        Ok((value, pred))
    }
}

/// `b = softmax(g·w)` over rows and `r = bᵀ g`. Returns `(b as 1×n, r as 1×width)`.
pub fn self_attention_pool<T: Real>(graph: &mut Graph<'_, T>, g: Var) -> Result<(Var, Var)> {
    let w = graph.param(SELF_ATTN)?;
    let tape = &mut graph.tape;
    let logits = tape.matmul(g, w)?;
    let logits = tape.transpose(logits)?;
    let b = tape.softmax(logits, 1)?;
    let r = tape.matmul(b, g)?;
    Ok((b, r))
}

fn rnn_dropout<T: Real>(graph: &mut Graph<'_, T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train {
            rnn_dropout, rng, ..
        } => graph.tape.dropout(x, *rnn_dropout, &mut **rng),
        Mode::Eval => Ok(x),
    }
}

/// Ensemble prediction by majority vote over member models.
pub fn ensemble_predict<T: Real>(members: &[Model<T>], ex: &Example) -> Result<Vote> {
    let preds = members
        .iter()
        .map(|m| m.predict(ex))
        .collect::<Result<Vec<_>>>()?;
    vote(&preds)
}
