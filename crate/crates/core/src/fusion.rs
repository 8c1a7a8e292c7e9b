//! Context-level attention and the three fusion perspectives.
//!
//! For each choice position `i` with context `c̄ᵢ` and attended passage and
//! question contexts `c̃ᵢᵖ`, `c̃ᵢ^q`:
//!
//! * union `uᵢ = [c̄ᵢ ; c̃ᵢᵖ ; c̃ᵢ^q]`
//! * difference `dᵢ = (c̄ᵢ − c̃ᵢᵖ) ⊙ (c̄ᵢ − c̃ᵢ^q)`
//! * similarity `sᵢ = c̄ᵢ ⊙ c̃ᵢᵖ ⊙ c̃ᵢ^q`
//!
//! Each active perspective goes through its own ReLU feed-forward layer and
//! the results are concatenated, always in union, difference, similarity
//! order, into the global representation `gᵢ`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Perspective {
    Union,
    Difference,
    Similarity,
}

impl Perspective {
    pub const ALL: [Perspective; 3] = [
        Perspective::Union,
        Perspective::Difference,
        Perspective::Similarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Perspective::Union => "union",
            Perspective::Difference => "difference",
            Perspective::Similarity => "similarity",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Perspective::Union => 'U',
            Perspective::Difference => 'D',
            Perspective::Similarity => 'S',
        }
    }

    /// Width of the fusion output for contexts of width `ctx`.
    pub fn fused_width(self, ctx: usize) -> usize {
        match self {
            Perspective::Union => 3 * ctx,
            _ => ctx,
        }
    }
}

/// Non-empty subset of the three perspectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Perspectives {
    pub union: bool,
    pub difference: bool,
    pub similarity: bool,
}

impl Perspectives {
    pub const FULL: Perspectives = Perspectives {
        union: true,
        difference: true,
        similarity: true,
    };

    pub fn only(p: Perspective) -> Self {
        let mut s = Perspectives {
            union: false,
            difference: false,
            similarity: false,
        };
        s.set(p, true);
        s
    }

    pub fn contains(&self, p: Perspective) -> bool {
        match p {
            Perspective::Union => self.union,
            Perspective::Difference => self.difference,
            Perspective::Similarity => self.similarity,
        }
    }

    pub fn set(&mut self, p: Perspective, on: bool) {
        match p {
            Perspective::Union => self.union = on,
            Perspective::Difference => self.difference = on,
            Perspective::Similarity => self.similarity = on,
        }
    }

    /// Active perspectives in canonical column order.
    pub fn active(&self) -> Vec<Perspective> {
        Perspective::ALL
            .into_iter()
            .filter(|&p| self.contains(p))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.active().len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Row label in the style `U`, `DU`, `SDU`.
    pub fn label(&self) -> String {
        let mut s = String::new();
        for p in [
            Perspective::Similarity,
            Perspective::Difference,
            Perspective::Union,
        ] {
            if self.contains(p) {
                s.push(p.letter());
            }
        }
        s
    }

    /// The seven non-empty subsets: singles, pairs, then all three.
    pub fn sweep() -> Vec<Perspectives> {
        ["u", "d", "s", "du", "su", "sd", "sdu"]
            .iter()
            .map(|s| s.parse().expect("static label"))
            .collect()
    }
}

impl FromStr for Perspectives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = Perspectives {
            union: false,
            difference: false,
            similarity: false,
        };
        for ch in s.trim().chars() {
            let p = match ch.to_ascii_lowercase() {
                'u' => Perspective::Union,
                'd' => Perspective::Difference,
                's' => Perspective::Similarity,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown perspective letter {other:?}"
                    )))
                }
            };
            set.set(p, true);
        }
        if set.is_empty() {
            return Err(Error::Usage("perspective set must not be empty".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for Perspectives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PostAggregation {
    None,
    /// A separate BiLSTM over each projected perspective, re-projected to
    /// the FNN width.
    BiRnn,
}

impl FromStr for PostAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PostAggregation::None),
            "birnn" | "bilstm" => Ok(PostAggregation::BiRnn),
            other => Err(Error::Usage(format!("unknown post aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub perspectives: Perspectives,
    pub post_aggregation: PostAggregation,
    pub fnn_hidden: usize,
    pub fnn_depth: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            perspectives: Perspectives::FULL,
            post_aggregation: PostAggregation::None,
            fnn_hidden: 123,
            fnn_depth: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.perspectives.is_empty() {
            return Err(Error::Config(
                "at least one perspective must be active".into(),
            ));
        }
        if self.fnn_hidden == 0 || self.fnn_depth == 0 {
            return Err(Error::Config(
                "fusion FNN width and depth must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of `gᵢ`.
    pub fn output_width(&self) -> usize {
        self.fnn_hidden * self.perspectives.count()
    }
}

fn fnn_name(p: Perspective, layer: usize, part: &str) -> String {
    format!("fusion.{}.fnn{layer}.{part}", p.name())
}

fn agg_prefix(p: Perspective) -> String {
    format!("fusion.{}.agg", p.name())
}

fn agg_proj(p: Perspective, part: &str) -> String {
    format!("fusion.{}.agg_proj.{part}", p.name())
}

/// Registers the FNN (and optional aggregation) weights of every active
/// perspective for contexts of width `ctx`.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    config: &FusionConfig,
    ctx: usize,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let h = config.fnn_hidden;
    for p in config.perspectives.active() {
        let mut input = p.fused_width(ctx);
        for layer in 0..config.fnn_depth {
            store.insert(
                fnn_name(p, layer, "w"),
                Tensor::xavier(input, h, rng)?.with_requires_grad(true),
            )?;
            store.insert(
                fnn_name(p, layer, "b"),
                Tensor::zeros(vec![h])?.with_requires_grad(true),
            )?;
            input = h;
        }
        if config.post_aggregation == PostAggregation::BiRnn {
            encoder::init_params(store, &agg_prefix(p), h, h, rng)?;
            store.insert(
                agg_proj(p, "w"),
                Tensor::xavier(2 * h, h, rng)?.with_requires_grad(true),
            )?;
            store.insert(
                agg_proj(p, "b"),
                Tensor::zeros(vec![h])?.with_requires_grad(true),
            )?;
        }
    }
    Ok(())
}

/// Dot-product attention of each choice context over `other`. Returns the
/// attended rows and the weight matrix.
pub fn context_attention<T: Real>(
    graph: &mut Graph<'_, T>,
    choice: Var,
    other: Var,
) -> Result<(Var, Var)> {
    let tape = &mut graph.tape;
    let (_, wc) = tape.shape(choice).as_matrix("context_attention")?;
    let (_, wo) = tape.shape(other).as_matrix("context_attention")?;
    if wc != wo {
        return Err(Error::dim(
            "context_attention",
            format!("widths {wc} vs {wo}"),
        ));
    }
    let other_t = tape.transpose(other)?;
    let scores = tape.matmul(choice, other_t)?;
    let beta = tape.softmax(scores, 1)?;
    let attended = tape.matmul(beta, other)?;
    Ok((attended, beta))
}

fn same_shapes<T: Real>(graph: &Graph<'_, T>, op: &'static str, vars: [Var; 3]) -> Result<()> {
    let s = graph.tape.shape(vars[0]);
    for v in &vars[1..] {
        if graph.tape.shape(*v) != s {
            return Err(Error::dim(op, format!("{} vs {}", s, graph.tape.shape(*v))));
        }
    }
    Ok(())
}

pub fn fuse_union<T: Real>(graph: &mut Graph<'_, T>, c: Var, p: Var, q: Var) -> Result<Var> {
    same_shapes(graph, "fuse_union", [c, p, q])?;
    graph.tape.concat(&[c, p, q], 1)
}

pub fn fuse_difference<T: Real>(graph: &mut Graph<'_, T>, c: Var, p: Var, q: Var) -> Result<Var> {
    graph.tape.difference_fusion(c, p, q)
}

pub fn fuse_similarity<T: Real>(graph: &mut Graph<'_, T>, c: Var, p: Var, q: Var) -> Result<Var> {
    graph.tape.similarity_fusion(c, p, q)
}

/// Intermediate values of one fusion pass, kept for inspection.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// Raw fusion outputs per active perspective.
    pub fused: Vec<(Perspective, Var)>,
    /// FNN (and aggregation) outputs per active perspective.
    pub projected: Vec<(Perspective, Var)>,
    /// Concatenation of `projected`.
    pub global: Var,
}

/// Builds `gᵢ` from the choice contexts and their attended counterparts.
pub fn global_representation<T: Real>(
    graph: &mut Graph<'_, T>,
    c: Var,
    p: Var,
    q: Var,
    config: &FusionConfig,
) -> Result<FusionOutput> {
    config.validate()?;
    let mut fused = Vec::new();
    let mut projected = Vec::new();
    for persp in config.perspectives.active() {
        for layer in 0..config.fnn_depth {
            if !graph.store().contains(&fnn_name(persp, layer, "w")) {
                return Err(Error::Config(format!(
                    "no parameters for the {} perspective layer {layer}",
                    persp.name()
                )));
            }
        }
        let f = match persp {
            Perspective::Union => fuse_union(graph, c, p, q)?,
            Perspective::Difference => fuse_difference(graph, c, p, q)?,
            Perspective::Similarity => fuse_similarity(graph, c, p, q)?,
        };
        let mut h = f;
        for layer in 0..config.fnn_depth {
            let w = graph.param(&fnn_name(persp, layer, "w"))?;
            let b = graph.param(&fnn_name(persp, layer, "b"))?;
            let z = graph.tape.matmul(h, w)?;
            let z = graph.tape.add_row(z, b)?;
            h = graph.tape.relu(z)?;
        }
        if config.post_aggregation == PostAggregation::BiRnn {
            let prefix = agg_prefix(persp);
            if !graph
                .store()
                .contains(&encoder::param_name(&prefix, "fw", "w_ih"))
            {
                return Err(Error::Config(format!(
                    "no aggregation parameters for the {} perspective",
                    persp.name()
                )));
            }
            let seq = encoder::encode(graph, &prefix, h)?;
            let w = graph.param(&agg_proj(persp, "w"))?;
            let b = graph.param(&agg_proj(persp, "b"))?;
            let z = graph.tape.matmul(seq, w)?;
            h = graph.tape.add_row(z, b)?;
        }
        fused.push((persp, f));
        projected.push((persp, h));
    }
    let parts: Vec<Var> = projected.iter().map(|&(_, v)| v).collect();
    let global = graph.tape.concat(&parts, 1)?;
    Ok(FusionOutput {
        fused,
        projected,
        global,
    })
}
