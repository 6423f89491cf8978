//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

/// Rounding in `f(x ± h)` perturbs the difference quotient by about
/// `ε·|f| / h`; disagreement below this many such units is not counted.
pub const ROUNDOFF_UNITS: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, entry, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_beyond(analytic, numeric, 0.0)
}

/// [`rel_err`] of the part of `|a - n|` exceeding `noise`.
pub fn rel_err_beyond(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Roundoff bound of a central difference from its two evaluations.
pub fn roundoff(up: f64, down: f64) -> f64 {
    ROUNDOFF_UNITS * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * STEP)
}

/// Compares the tape gradient of a scalar-valued `f` against central
/// differences for every input. When `max_entries` is set, at most that
/// many randomly chosen entries per input are probed.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, max_entries: Option<usize>, seed: u64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vs: Vec<_> = probe.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = rel_err_beyond(analytic[i].data()[j], numeric, roundoff(up, down));
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((i, j, analytic[i].data()[j], numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// [`check`] over a module: every parameter of `store` is probed along
/// with the explicit `inputs`.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.iter().map(|p| p.value.clone()));
    check(
        &all,
        |g, v| {
            let bound = Bound::from_vars(v[n..].to_vec());
            f(g, &bound, &v[..n])
        },
        max_entries,
        seed,
    )
}

/// Replaces every parameter with uniform noise in `[-scale, scale]`
/// (norm gains in `1 ± scale`) so that no block sits at its zero-init
/// degenerate point.
pub fn randomize_params(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a4a_11);
    for p in store.iter_mut() {
        let base = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
        p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| base + rng.gen_range(-scale..scale));
    }
}

/// A fixed random tensor used to reduce a block's output to a scalar.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a0b);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `sum(out ⊙ R)` for a fixed random `R`.
pub fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let r = out.graph().constant(projection(&out.shape(), seed));
    out.mul(r)?.sum()
}

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}
