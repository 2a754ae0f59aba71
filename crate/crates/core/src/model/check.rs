use super::{forward_loss, Dropout, ModelError, ModelParams};
use crate::numerics::{check_coordinates, GradCheckReport, Graph};
use crate::textdata::Batch;

/// Finite-difference check of the full model loss gradient on `batch`,
/// sampling `samples` coordinates across every named parameter.
pub fn grad_check_model(
    params: &ModelParams<f64>,
    batch: &Batch,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let g = Graph::<f64>::new();
    let (loss, _) = forward_loss(&g, params, batch, &mut Dropout::off())?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| grads.param(i).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(grads);
    let mut work = params.clone();
    let eval = |perturbed: &[crate::numerics::Tensor<f64>]| -> Result<f64, ModelError> {
        work.tensors_mut().clone_from_slice(perturbed);
        let g = Graph::<f64>::inference();
        Ok(forward_loss(&g, &work, batch, &mut Dropout::off())?.0.item())
    };
    check_coordinates(&analytic, params.tensors(), eval, h, samples, seed)
}
