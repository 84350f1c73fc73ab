//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(param index, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const MIN_SAMPLES: usize = 200;

/// Compares analytic gradients of `f` against central differences on up to
/// `samples` coordinates drawn without replacement (all when fewer exist).
pub fn grad_check<F>(params: &[Tensor], f: F, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if !v.is_finite() {
            return Err(Error::NonFiniteValue("loss during gradient check".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !loss.value().item().is_finite() {
        return Err(Error::NonFiniteValue("loss during gradient check".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        sample(&mut rng, total, samples).into_vec()
    };
    picks.sort_unstable();

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[pi];
        let orig = work[pi].data[ci];
        work[pi].data[ci] = orig + eps;
        let up = eval(&work)?;
        work[pi].data[ci] = orig - eps;
        let down = eval(&work)?;
        work[pi].data[ci] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[pi][ci];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((pi, ci, a, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}
