//! Algebraic invariants as proptest strategies plus case checks, shared by
//! the property tests and the acceptance run.

use mpfn::encoder;
use mpfn::fusion::{fuse_difference, fuse_similarity};
use mpfn::tensor::{Graph, ParamStore, Tensor};
use mpfn::Var;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), TestCaseError>;

pub fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::from_vec(vec![rows, cols], v).unwrap())
}

/// Three tensors of one random shape.
pub fn triple() -> impl Strategy<Value = [Tensor<f64>; 3]> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| [matrix(r, c), matrix(r, c), matrix(r, c)])
}

pub fn values(g: &Graph<'_, f64>, v: Var) -> Vec<f64> {
    g.tape.value(v).to_vec()
}

pub fn difference_swap([c, p, q]: [Tensor<f64>; 3]) -> Check {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (c, p, q) = (
        g.tape.input(c).unwrap(),
        g.tape.input(p).unwrap(),
        g.tape.input(q).unwrap(),
    );
    let a = fuse_difference(&mut g, c, p, q).unwrap();
    let b = fuse_difference(&mut g, c, q, p).unwrap();
    prop_assert_eq!(values(&g, a), values(&g, b));
    Ok(())
}

pub const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

pub fn similarity_permutation(([c, p, q], perm): ([Tensor<f64>; 3], usize)) -> Check {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let vars = [
        g.tape.input(c).unwrap(),
        g.tape.input(p).unwrap(),
        g.tape.input(q).unwrap(),
    ];
    let order = PERMUTATIONS[perm];
    let base = fuse_similarity(&mut g, vars[0], vars[1], vars[2]).unwrap();
    let other = fuse_similarity(&mut g, vars[order[0]], vars[order[1]], vars[order[2]]).unwrap();
    for (x, y) in values(&g, base).iter().zip(values(&g, other)) {
        prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
    Ok(())
}

/// A matrix, a magnitude and an additive shift for softmax inputs.
pub fn softmax_input() -> impl Strategy<Value = (Tensor<f64>, f64, f64)> {
    (
        (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c)),
        prop_oneof![Just(1.0), Just(30.0), Just(400.0)],
        -50.0f64..50.0,
    )
}

/// Rows sum to one and adding a constant leaves the output unchanged.
pub fn softmax_rows((x, scale, shift): (Tensor<f64>, f64, f64)) -> Check {
    let (rows, cols) = (x.dims()[0], x.dims()[1]);
    let scaled = Tensor::from_vec(
        vec![rows, cols],
        x.data().iter().map(|v| v * scale).collect(),
    )
    .unwrap();
    let shifted = Tensor::from_vec(
        vec![rows, cols],
        scaled.data().iter().map(|v| v + shift).collect(),
    )
    .unwrap();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.tape.input(scaled).unwrap();
    let b = g.tape.input(shifted).unwrap();
    let sa = g.tape.softmax(a, 1).unwrap();
    let sb = g.tape.softmax(b, 1).unwrap();
    let (va, vb) = (values(&g, sa), values(&g, sb));
    for row in va.chunks(cols) {
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    for (x, y) in va.iter().zip(&vb) {
        prop_assert!((x - y).abs() <= 1e-9);
    }
    Ok(())
}

/// Sequence length, input width, hidden width and a parameter seed.
pub fn encoder_input() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..6, 1usize..5, 1usize..4, any::<u64>())
}

/// With both directions sharing weights, encoding the reversed sequence
/// gives the original rows reversed with their halves swapped.
pub fn encoder_reversal((n, d_in, hidden, seed): (usize, usize, usize, u64)) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    encoder::init_params(&mut store, "e", d_in, hidden, &mut rng).unwrap();
    for part in ["w_ih", "w_hh", "b"] {
        let fw = store
            .get(&encoder::param_name("e", "fw", part))
            .unwrap()
            .clone();
        *store
            .get_mut(&encoder::param_name("e", "bw", part))
            .unwrap() = fw;
    }
    let seq = Tensor::<f64>::uniform(vec![n, d_in], -1.0, 1.0, &mut rng).unwrap();
    let rev_rows: Vec<f64> = seq.data().chunks(d_in).rev().flatten().copied().collect();
    let rev = Tensor::from_vec(vec![n, d_in], rev_rows).unwrap();

    let mut g = Graph::new(&store);
    let x = g.tape.input(seq).unwrap();
    let xr = g.tape.input(rev).unwrap();
    let out = encoder::encode(&mut g, "e", x).unwrap();
    let out_rev = encoder::encode(&mut g, "e", xr).unwrap();
    let w = 2 * hidden;
    let (fwd, bwd) = (values(&g, out), values(&g, out_rev));
    for t in 0..n {
        let a = &fwd[t * w..(t + 1) * w];
        let b = &bwd[(n - 1 - t) * w..(n - t) * w];
        prop_assert_eq!(&a[..hidden], &b[hidden..]);
        prop_assert_eq!(&a[hidden..], &b[..hidden]);
    }
    Ok(())
}

/// Runs `check` on `cases` inputs drawn from `strategy` with a fixed seed.
pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Check,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    );
    runner.run(&strategy, check).map_err(|e| e.to_string())
}
