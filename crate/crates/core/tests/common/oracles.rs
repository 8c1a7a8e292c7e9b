//! Tape implementations against plain scalar loops. Each check returns the
//! largest absolute deviation seen over `trials` random inputs.

use mpfn::encoder;
use mpfn::features::word_level_attention;
use mpfn::fusion::{context_attention, fuse_difference, fuse_similarity, fuse_union};
use mpfn::tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect()
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::from_vec(
        vec![m.len(), m[0].len()],
        m.iter().flatten().copied().collect(),
    )
    .unwrap()
}

fn max_diff(a: &[f64], b: &Mat) -> f64 {
    assert_eq!(a.len(), b.iter().map(Vec::len).sum::<usize>());
    a.iter()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Σ_j softmax_j(score(i, j)) · values_j for every row i, plus the weights.
fn attend(
    rows: usize,
    keys: usize,
    score: impl Fn(usize, usize) -> f64,
    values: &Mat,
) -> (Mat, Mat) {
    let mut out = vec![vec![0.0; values[0].len()]; rows];
    let mut weights = Vec::new();
    for (i, row) in out.iter_mut().enumerate() {
        let w = softmax_row(&(0..keys).map(|j| score(i, j)).collect::<Vec<_>>());
        for (j, &wj) in w.iter().enumerate() {
            for (o, v) in row.iter_mut().zip(&values[j]) {
                *o += wj * v;
            }
        }
        weights.push(w);
    }
    (out, weights)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn word_attention(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, m, d, k) = (
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(2..7),
            rng.gen_range(1..5),
        );
        let c = random_mat(n, d, &mut rng);
        let p = random_mat(m, d, &mut rng);
        let w = random_mat(d, k, &mut rng);
        let proj = |x: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|col| (0..d).map(|r| x[r] * w[r][col]).sum::<f64>().max(0.0))
                .collect()
        };
        let pc: Mat = c.iter().map(|r| proj(r)).collect();
        let pp: Mat = p.iter().map(|r| proj(r)).collect();
        let (expect, alpha) = attend(n, m, |i, j| dot(&pc[i], &pp[j]), &p);

        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let cv = g.tape.input(tensor(&c)).unwrap();
        let pv = g.tape.input(tensor(&p)).unwrap();
        let wv = g.tape.input(tensor(&w)).unwrap();
        let (att, a) = word_level_attention(&mut g, cv, pv, wv).unwrap();
        worst = worst.max(max_diff(g.tape.value(att), &expect));
        worst = worst.max(max_diff(g.tape.value(a), &alpha));
    }
    worst
}

pub fn context_attn(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, m, d) = (
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(1..9),
        );
        let c = random_mat(n, d, &mut rng);
        let p = random_mat(m, d, &mut rng);
        let (expect, beta) = attend(n, m, |i, j| dot(&c[i], &p[j]), &p);

        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let cv = g.tape.input(tensor(&c)).unwrap();
        let pv = g.tape.input(tensor(&p)).unwrap();
        let (att, b) = context_attention(&mut g, cv, pv).unwrap();
        worst = worst.max(max_diff(g.tape.value(att), &expect));
        worst = worst.max(max_diff(g.tape.value(b), &beta));
    }
    worst
}

/// Worst deviation of the union, difference and similarity fusions.
pub fn fusions(trials: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..trials {
        let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..9));
        let c = random_mat(n, d, &mut rng);
        let p = random_mat(n, d, &mut rng);
        let q = random_mat(n, d, &mut rng);
        let mut union = Vec::new();
        let mut diff = Vec::new();
        let mut sim = Vec::new();
        for i in 0..n {
            union.push([c[i].clone(), p[i].clone(), q[i].clone()].concat());
            diff.push(
                (0..d)
                    .map(|k| (c[i][k] - p[i][k]) * (c[i][k] - q[i][k]))
                    .collect(),
            );
            sim.push((0..d).map(|k| c[i][k] * p[i][k] * q[i][k]).collect());
        }

        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let cv = g.tape.input(tensor(&c)).unwrap();
        let pv = g.tape.input(tensor(&p)).unwrap();
        let qv = g.tape.input(tensor(&q)).unwrap();
        let u = fuse_union(&mut g, cv, pv, qv).unwrap();
        let dd = fuse_difference(&mut g, cv, pv, qv).unwrap();
        let s = fuse_similarity(&mut g, cv, pv, qv).unwrap();
        assert_eq!(g.tape.shape(u).dims(), &[n, 3 * d]);
        worst[0] = worst[0].max(max_diff(g.tape.value(u), &union));
        worst[1] = worst[1].max(max_diff(g.tape.value(dd), &diff));
        worst[2] = worst[2].max(max_diff(g.tape.value(s), &sim));
    }
    worst
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM direction, gates in input, forget, candidate, output order.
fn lstm_loop(seq: &Mat, w_ih: &[f64], w_hh: &[f64], b: &[f64], hidden: usize) -> Mat {
    let d_in = seq[0].len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::new();
    for x in seq {
        let mut z = b.to_vec();
        for (col, zc) in z.iter_mut().enumerate() {
            for r in 0..d_in {
                *zc += x[r] * w_ih[r * 4 * hidden + col];
            }
            for r in 0..hidden {
                *zc += h[r] * w_hh[r * 4 * hidden + col];
            }
        }
        for k in 0..hidden {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[hidden + k]);
            let g = z[2 * hidden + k].tanh();
            let o = sigmoid(z[3 * hidden + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        out.push(h.clone());
    }
    out
}

pub fn bilstm(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (d_in, hidden) = (rng.gen_range(1..6), rng.gen_range(1..5));
        let mut store = ParamStore::<f64>::new();
        encoder::init_params(&mut store, "e", d_in, hidden, &mut rng).unwrap();
        // exercise nonzero biases too
        for dir in encoder::DIRECTIONS {
            let b = store.get_mut(&encoder::param_name("e", dir, "b")).unwrap();
            b.data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.gen_range(-0.5..0.5));
        }
        let n = if trial == 0 { 1 } else { rng.gen_range(2..6) };
        let seq = random_mat(n, d_in, &mut rng);
        let part = |dir: &str, name: &str| {
            store
                .get(&encoder::param_name("e", dir, name))
                .unwrap()
                .data()
                .to_vec()
        };
        let fw = lstm_loop(
            &seq,
            &part("fw", "w_ih"),
            &part("fw", "w_hh"),
            &part("fw", "b"),
            hidden,
        );
        let reversed: Mat = seq.iter().rev().cloned().collect();
        let mut bw = lstm_loop(
            &reversed,
            &part("bw", "w_ih"),
            &part("bw", "w_hh"),
            &part("bw", "b"),
            hidden,
        );
        bw.reverse();
        let expect: Mat = fw
            .into_iter()
            .zip(bw)
            .map(|(f, b)| [f, b].concat())
            .collect();

        let mut g = Graph::new(&store);
        let x = g.tape.input(tensor(&seq)).unwrap();
        let out = encoder::encode(&mut g, "e", x).unwrap();
        assert_eq!(g.tape.shape(out).dims(), &[n, 2 * hidden]);
        worst = worst.max(max_diff(g.tape.value(out), &expect));
    }
    worst
}
