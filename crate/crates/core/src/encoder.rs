//! One-layer bidirectional LSTM over a single unpadded sequence.
//!
//! Gate layout inside the `4h` columns is input, forget, candidate, output.
//! Each direction stores `w_ih` (`d_in × 4h`), `w_hh` (`h × 4h`) and `b`
//! (`4h`) under `<prefix>.fw.*` and `<prefix>.bw.*`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const DIRECTIONS: [&str; 2] = ["fw", "bw"];

pub fn param_name(prefix: &str, direction: &str, part: &str) -> String {
    format!("{prefix}.{direction}.{part}")
}

/// Xavier-uniform weights, zero biases except the forget gate, which starts at 1.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    for dir in DIRECTIONS {
        let w_ih = Tensor::<T>::xavier(input, 4 * hidden, rng)?;
        let w_hh = Tensor::<T>::xavier(hidden, 4 * hidden, rng)?;
        let mut b = Tensor::<T>::zeros(vec![4 * hidden])?;
        b.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|x| *x = T::one());
        store.insert(
            param_name(prefix, dir, "w_ih"),
            w_ih.with_requires_grad(true),
        )?;
        store.insert(
            param_name(prefix, dir, "w_hh"),
            w_hh.with_requires_grad(true),
        )?;
        store.insert(param_name(prefix, dir, "b"), b.with_requires_grad(true))?;
    }
    Ok(())
}

/// `(input width, hidden width)` of the encoder stored under `prefix`.
pub fn widths<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<(usize, usize)> {
    let w_ih = store.get(&param_name(prefix, "fw", "w_ih"))?;
    let w_hh = store.get(&param_name(prefix, "fw", "w_hh"))?;
    Ok((w_ih.dims()[0], w_hh.dims()[0]))
}

/// Encodes `seq` (`n × d_in`) into `n × 2h`: row `t` is the forward state
/// at `t` followed by the backward state at `t`. Initial states are zero.
pub fn encode<T: Real>(graph: &mut Graph<'_, T>, prefix: &str, seq: Var) -> Result<Var> {
    let (n, d_in) = graph.tape.shape(seq).as_matrix("encode")?;
    let (expect_in, _) = widths(graph.store(), prefix)?;
    if d_in != expect_in {
        return Err(Error::dim(
            "encode",
            format!("{prefix} expects input width {expect_in}, got {d_in}"),
        ));
    }
    let forward = run_direction(graph, prefix, "fw", seq, n, false)?;
    let backward = run_direction(graph, prefix, "bw", seq, n, true)?;
    graph.tape.concat(&[forward, backward], 1)
}

fn run_direction<T: Real>(
    graph: &mut Graph<'_, T>,
    prefix: &str,
    dir: &str,
    seq: Var,
    n: usize,
    reverse: bool,
) -> Result<Var> {
    let w_ih = graph.param(&param_name(prefix, dir, "w_ih"))?;
    let w_hh = graph.param(&param_name(prefix, dir, "w_hh"))?;
    let b = graph.param(&param_name(prefix, dir, "b"))?;
    let hidden = graph.tape.shape(w_hh).dims()[0];
    let tape = &mut graph.tape;

    // input projections for every step at once
    let projected = tape.matmul(seq, w_ih)?;
    let projected = tape.add_row(projected, b)?;

    let mut h = tape.constant(vec![1, hidden], vec![T::zero(); hidden])?;
    let mut c = tape.constant(vec![1, hidden], vec![T::zero(); hidden])?;
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for t in order {
        let x_t = tape.row(projected, t)?;
        let rec = tape.matmul(h, w_hh)?;
        let gates = tape.add(x_t, rec)?;
        let i_pre = tape.slice(gates, 1, 0, hidden)?;
        let f_pre = tape.slice(gates, 1, hidden, hidden)?;
        let g_pre = tape.slice(gates, 1, 2 * hidden, hidden)?;
        let o_pre = tape.slice(gates, 1, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c)?;
        h = tape.mul(o, squashed)?;
        states[t] = h;
    }
    tape.concat(&states, 0)
}
