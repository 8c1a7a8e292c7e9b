//! The standard battery: every tape op on its own, each model component,
//! and whole models end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_store, CheckConfig, TensorReport};
use crate::encoder;
use crate::error::Result;
use crate::features::{self, AnnotatedToken, EmbeddingDims, Vocabs};
use crate::fusion::{self, FusionConfig, PostAggregation};
use crate::mode::Mode;
use crate::model::{self, Example, Model, ModelConfig, OutputMode};
use crate::tensor::{Graph, OpKind, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub check: CheckConfig,
    /// Also check a model at the default widths on sampled coordinates.
    pub full_width: bool,
    /// Coordinates per tensor for the full-width model.
    pub full_width_coords: usize,
    /// Sign-flip the backward pass of this op everywhere.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            check: CheckConfig::default(),
            full_width: false,
            full_width_coords: 4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub reports: Vec<TensorReport>,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn worst(&self) -> Option<&TensorReport> {
        self.reports
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }
}

/// Values in ±[0.2, 1], away from ReLU and softplus kinks.
fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(dims.to_vec(), data).expect("sized above")
}

fn store_of(params: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for &(name, dims) in params {
        store
            .insert(name, random(dims, &mut rng).with_requires_grad(true))
            .expect("distinct names");
    }
    store
}

/// Weighted sum with fixed pseudo-random weights, so every output
/// coordinate gets a distinct upstream gradient.
fn readout(graph: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let n = graph.tape.shape(y).numel();
    let weights = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.45)
        .collect();
    let w = graph.tape.mul_const(y, weights)?;
    graph.tape.sum(w)
}

type OpBuilder = fn(&mut Graph<'_, f64>) -> Result<Var>;

type OpCase = (
    &'static str,
    Vec<(&'static str, &'static [usize])>,
    OpBuilder,
);

fn op_cases() -> Vec<OpCase> {
    const M: &[usize] = &[3, 4];
    vec![
        ("matmul", vec![("a", M), ("b", &[4, 2])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.tape.matmul(a, b)
        }),
        ("transpose", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.transpose(a)
        }),
        ("add", vec![("a", M), ("b", M)], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.tape.add(a, b)
        }),
        ("sub", vec![("a", M), ("b", M)], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.tape.sub(a, b)
        }),
        ("mul", vec![("a", M), ("b", M)], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.tape.mul(a, b)
        }),
        ("scale", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.scale(a, -1.7)
        }),
        ("relu", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.relu(a)
        }),
        ("sigmoid", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.sigmoid(a)
        }),
        ("tanh", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.tanh(a)
        }),
        ("softplus", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.softplus(a)
        }),
        ("add_row", vec![("a", M), ("b", &[4])], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.tape.add_row(a, b)
        }),
        ("softmax", vec![("a", M)], |g| {
            let a = g.param("a")?;
            let rows = g.tape.softmax(a, 1)?;
            let cols = g.tape.softmax(a, 0)?;
            g.tape.concat(&[rows, cols], 0)
        }),
        ("log_softmax", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape.log_softmax(a, 1)
        }),
        ("concat", vec![("a", M), ("b", M)], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            let wide = g.tape.concat(&[a, b], 1)?;
            let tall = g.tape.concat(&[a, b], 0)?;
            let x = readout(g, wide)?;
            let y = readout(g, tall)?;
            g.tape.add(x, y)
        }),
        ("slice", vec![("a", M)], |g| {
            let a = g.param("a")?;
            let s = g.tape.slice(a, 1, 1, 2)?;
            g.tape.slice(s, 0, 1, 2)
        }),
        ("gather_rows", vec![("a", &[5, 4])], |g| {
            let a = g.param("a")?;
            g.tape.gather_rows(a, &[1, 3, 1, 0])
        }),
        ("sum", vec![("a", M)], |g| {
            let a = g.param("a")?;
            let sq = g.tape.mul(a, a)?;
            let s = g.tape.sum(sq)?;
            g.tape.mean(s)
        }),
        ("mul_const", vec![("a", M)], |g| {
            let a = g.param("a")?;
            g.tape
                .mul_const(a, (0..12).map(|i| i as f64 - 5.5).collect())
        }),
        (
            "difference_fusion",
            vec![("c", M), ("p", M), ("q", M)],
            |g| {
                let (c, p, q) = (g.param("c")?, g.param("p")?, g.param("q")?);
                g.tape.difference_fusion(c, p, q)
            },
        ),
        (
            "similarity_fusion",
            vec![("c", M), ("p", M), ("q", M)],
            |g| {
                let (c, p, q) = (g.param("c")?, g.param("p")?, g.param("q")?);
                g.tape.similarity_fusion(c, p, q)
            },
        ),
    ]
}

fn run_one<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    objective: F,
    cfg: &SuiteConfig,
) -> Result<CheckOutcome>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    run_with(name, store, objective, &cfg.check, cfg.fault)
}

fn run_with<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    objective: F,
    check: &CheckConfig,
    fault: Option<OpKind>,
) -> Result<CheckOutcome>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let reports = check_store(
        store,
        |g| {
            if let Some(kind) = fault {
                g.tape.inject_fault(kind);
            }
            objective(g)
        },
        check,
    )?;
    let passed = reports.iter().all(|r| r.passed(check.tolerance));
    Ok(CheckOutcome {
        name: name.to_string(),
        reports,
        passed,
    })
}

fn tok(word: usize, rel: usize) -> AnnotatedToken {
    AnnotatedToken {
        word,
        pos: 2 + word % 2,
        ner: 2,
        rel,
        tf: 0.1 * word as f64,
    }
}

/// Three-token passage and question, two-token choices, sharing some words.
pub fn toy_example() -> (Vocabs, Example) {
    let mut vocabs = Vocabs::default();
    for w in ["bed", "sleep", "tired", "room", "own", "play"] {
        vocabs.words.insert(w);
    }
    for t in ["NN", "VB"] {
        vocabs.pos.insert(t);
    }
    vocabs.ner.insert("O");
    vocabs.rel.insert("RelatedTo");
    let ex = Example {
        id: "toy".into(),
        passage: vec![tok(2, 1), tok(3, 2), tok(4, 1)],
        question: vec![tok(5, 1), tok(3, 1), tok(6, 2)],
        choices: vec![vec![tok(3, 2), tok(7, 1)], vec![tok(6, 1), tok(4, 1)]],
        label: Some(1),
    };
    (vocabs, ex)
}

/// Small widths with the full architecture.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dims: EmbeddingDims {
            word: 5,
            pos: 2,
            ner: 2,
            rel: 2,
            attn: 3,
        },
        fusion: FusionConfig {
            fnn_hidden: 3,
            ..FusionConfig::default()
        },
        hidden: 3,
        ..ModelConfig::default()
    }
}

/// Checks every parameter of a model built from `config` on [`toy_example`].
pub fn model_check(
    name: &str,
    config: ModelConfig,
    check: &CheckConfig,
    fault: Option<OpKind>,
) -> Result<CheckOutcome> {
    let (vocabs, ex) = toy_example();
    let table = features::random_word_table(vocabs.words.len(), config.dims.word, 3)?;
    let mut model = Model::<f64>::new(config, vocabs, &table, 4)?;
    let mut store = std::mem::take(&mut model.params);
    let shell = model;
    let label = ex.require_label()?;
    run_with(
        name,
        &mut store,
        |g| {
            let fwd = shell.forward(g, &ex, &mut Mode::Eval)?;
            shell.loss(g, &fwd, label)
        },
        check,
        fault,
    )
}

/// Runs every check and returns one outcome per check, in a fixed order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, (name, params, build)) in op_cases().into_iter().enumerate() {
        let mut store = store_of(&params, 100 + k as u64);
        out.push(run_one(
            &format!("op:{name}"),
            &mut store,
            |g| {
                let y = build(g)?;
                readout(g, y)
            },
            cfg,
        )?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = store_of(&[("x", &[3, 4])], 8);
    encoder::init_params(&mut store, "enc", 4, 3, &mut rng)?;
    out.push(run_one(
        "module:encoder",
        &mut store,
        |g| {
            let x = g.param("x")?;
            let h = encoder::encode(g, "enc", x)?;
            readout(g, h)
        },
        cfg,
    )?);

    let mut store = store_of(&[("c", &[3, 5]), ("p", &[4, 5]), ("w", &[5, 3])], 9);
    out.push(run_one(
        "module:word_attention",
        &mut store,
        |g| {
            let (c, p, w) = (g.param("c")?, g.param("p")?, g.param("w")?);
            let (att, alpha) = features::word_level_attention(g, c, p, w)?;
            let a = readout(g, att)?;
            let b = readout(g, alpha)?;
            g.tape.add(a, b)
        },
        cfg,
    )?);

    let mut store = store_of(&[("c", &[3, 6]), ("p", &[4, 6])], 10);
    out.push(run_one(
        "module:context_attention",
        &mut store,
        |g| {
            let (c, p) = (g.param("c")?, g.param("p")?);
            let (att, beta) = fusion::context_attention(g, c, p)?;
            let a = readout(g, att)?;
            let b = readout(g, beta)?;
            g.tape.add(a, b)
        },
        cfg,
    )?);

    for (name, agg) in [
        ("module:fusion", PostAggregation::None),
        ("module:fusion_birnn", PostAggregation::BiRnn),
    ] {
        let fcfg = FusionConfig {
            fnn_hidden: 3,
            post_aggregation: agg,
            ..FusionConfig::default()
        };
        let mut store = store_of(&[("c", &[3, 4]), ("p", &[3, 4]), ("q", &[3, 4])], 11);
        fusion::init_params(&mut store, &fcfg, 4, &mut rng)?;
        out.push(run_one(
            name,
            &mut store,
            |g| {
                let (c, p, q) = (g.param("c")?, g.param("p")?, g.param("q")?);
                let f = fusion::global_representation(g, c, p, q, &fcfg)?;
                readout(g, f.global)
            },
            cfg,
        )?);
    }

    let mut store = store_of(&[("g", &[4, 5]), (model::SELF_ATTN, &[5, 1])], 12);
    out.push(run_one(
        "module:self_attention",
        &mut store,
        |g| {
            let x = g.param("g")?;
            let (b, r) = model::self_attention_pool(g, x)?;
            let a = readout(g, b)?;
            let c = readout(g, r)?;
            g.tape.add(a, c)
        },
        cfg,
    )?);

    let base = tiny_config();
    out.push(model_check("model:sdu", base, &cfg.check, cfg.fault)?);
    let mut birnn = base;
    birnn.fusion.post_aggregation = PostAggregation::BiRnn;
    out.push(model_check(
        "model:sdu_birnn",
        birnn,
        &cfg.check,
        cfg.fault,
    )?);
    let mut sigmoid = base;
    sigmoid.output = OutputMode::Sigmoid;
    out.push(model_check(
        "model:sdu_sigmoid",
        sigmoid,
        &cfg.check,
        cfg.fault,
    )?);

    if cfg.full_width {
        let check = CheckConfig {
            max_coords: Some(cfg.full_width_coords),
            ..cfg.check.clone()
        };
        out.push(model_check(
            "model:sdu_full_width",
            ModelConfig::default(),
            &check,
            cfg.fault,
        )?);
    }
    Ok(out)
}

/// Plain-text report, one line per check plus a summary.
pub fn render(outcomes: &[CheckOutcome], tolerance: f64) -> String {
    let mut s = String::new();
    for o in outcomes {
        let (worst, tensor) = o
            .worst()
            .map_or((0.0, "-"), |r| (r.worst_rel_error, r.name.as_str()));
        s.push_str(&format!(
            "{}\t{}\tworst {worst:.3e} in {tensor}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name
        ));
        for r in o.reports.iter().filter(|r| !r.passed(tolerance)) {
            s.push_str(&format!(
                "\t{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}\n",
                r.name, r.worst_index, r.analytic, r.numeric, r.worst_rel_error
            ));
        }
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    s.push_str(&format!(
        "{} checks, {failed} failed, tolerance {tolerance:e}\n",
        outcomes.len()
    ));
    s
}
