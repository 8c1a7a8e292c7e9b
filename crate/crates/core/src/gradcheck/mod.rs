//! Central finite-difference verification of tape gradients.
//!
//! The objective builds a scalar on a fresh [`Graph`] over the parameter
//! store. Analytic gradients come from one reverse pass; numeric ones from
//! `(f(x+h) - f(x-h)) / 2h` per coordinate. When a coordinate disagrees the
//! step is shrunk twice before it is declared a failure, which keeps ReLU
//! kinks inside the `±h` window from producing false alarms.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl TensorReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and numeric gradients of every trainable tensor.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    objective: F,
    cfg: &CheckConfig,
) -> Result<Vec<TensorReport>>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let analytic = {
        let mut graph = Graph::new(store);
        let loss = objective(&mut graph)?;
        graph.backward(loss)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut graph = Graph::new(store);
        let loss = objective(&mut graph)?;
        Ok(graph.tape.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let numel = store.get(&name)?.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let grad = analytic.get(&name);
        let mut report = TensorReport {
            name: name.clone(),
            checked: coords.len(),
            worst_rel_error: -1.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &k in &coords {
            let a = grad.map_or(0.0, |g| g[k]);
            let mut best: Option<(f64, f64)> = None;
            let mut h = cfg.step;
            for _ in 0..3 {
                let n = central_difference(store, &name, k, h, &eval)?;
                let err = relative_error(a, n, cfg.floor);
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, n));
                }
                if err <= cfg.tolerance {
                    break;
                }
                h /= 10.0;
            }
            let (err, n) = best.expect("at least one step evaluated");
            if err > report.worst_rel_error {
                report.worst_rel_error = err;
                report.worst_index = k;
                report.analytic = a;
                report.numeric = n;
            }
        }
        report.worst_rel_error = report.worst_rel_error.max(0.0);
        reports.push(report);
    }
    Ok(reports)
}

fn central_difference(
    store: &mut ParamStore<f64>,
    name: &str,
    k: usize,
    h: f64,
    eval: &dyn Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<f64> {
    let orig = store.get(name)?.data()[k];
    store.get_mut(name)?.data_mut()[k] = orig + h;
    let plus = eval(store);
    store.get_mut(name)?.data_mut()[k] = orig - h;
    let minus = eval(store);
    store.get_mut(name)?.data_mut()[k] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}
