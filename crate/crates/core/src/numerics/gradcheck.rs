use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, Tensor, Var};

/// Magnitudes below this are treated as this when forming relative errors,
/// so coordinates whose true gradient is zero compare on an absolute scale.
/// Central differences in f64 with `h = 1e-5` on an O(1) loss carry about
/// 1e-10 of round-off, so a zero gradient measured that way stays below
/// 1e-4 relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(param index, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar `f(params)` against central
/// finite differences with step `h`, on `samples` coordinates drawn across
/// all parameters (round-robin over tensors, uniform within each).
pub fn grad_check<E, F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>, E>,
{
    let graph = Graph::<f64>::new();
    let vars: Vec<_> = params.iter().map(|p| graph.variable(p.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .wrt(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    drop(grads);
    drop(graph);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let g = Graph::<f64>::inference();
        let vars: Vec<_> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    check_coordinates(&analytic, params, eval, h, samples, seed)
}

/// Central-difference comparison of precomputed `analytic` gradients, with
/// `eval` computing the scalar at perturbed parameter values. Coordinates are
/// drawn round-robin over tensors, uniformly within each; with `samples` at
/// least the total size, every coordinate is checked.
pub fn check_coordinates<E>(
    analytic: &[Vec<f64>],
    params: &[Tensor<f64>],
    mut eval: impl FnMut(&[Tensor<f64>]) -> Result<f64, E>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(samples);
    let total: usize = params.iter().map(Tensor::len).sum();
    if samples >= total {
        for (pi, p) in params.iter().enumerate() {
            coords.extend((0..p.len()).map(|c| (pi, c)));
        }
    } else {
        for s in 0..samples {
            let pi = s % params.len();
            coords.push((pi, rng.gen_range(0..params[pi].len())));
        }
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, c) in coords {
        let orig = params[pi][c];
        work[pi].data_mut()[c] = orig + h;
        let plus = eval(&work)?;
        work[pi].data_mut()[c] = orig - h;
        let minus = eval(&work)?;
        work[pi].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[pi][c];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((pi, c, a, numeric));
        }
    }
    Ok(report)
}
