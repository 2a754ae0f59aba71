use super::EvalError;
use crate::model::{forward_loss, Dropout, ModelParams};
use crate::numerics::{Graph, Real};
use crate::textdata::{make_batch, Example};

/// Summed token negative log-likelihood and the number of supervised tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllTotal {
    pub nll: f64,
    pub tokens: usize,
}

impl NllTotal {
    pub fn add(&mut self, other: NllTotal) {
        self.nll += other.nll;
        self.tokens += other.tokens;
    }

    pub fn perplexity(&self) -> Result<f64, EvalError> {
        perplexity_from_nll(self.nll, self.tokens)
    }
}

/// `exp(nll / tokens)`.
pub fn perplexity_from_nll(nll: f64, tokens: usize) -> Result<f64, EvalError> {
    if tokens == 0 {
        return Err(EvalError::ZeroTokens);
    }
    Ok((nll / tokens as f64).exp())
}

/// Teacher-forced NLL over `examples`, in batches of `batch_size`. Each
/// batch's mean loss is scaled back by its token count before summing.
pub fn corpus_nll<T: Real>(
    params: &ModelParams<T>,
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
) -> Result<NllTotal, EvalError> {
    let mut total = NllTotal::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, max_len)?;
        let g = Graph::<T>::inference();
        let (loss, count) = forward_loss(&g, params, &batch, &mut Dropout::off())?;
        total.add(NllTotal {
            nll: loss.item().to_f64() * count as f64,
            tokens: count,
        });
    }
    Ok(total)
}

pub fn perplexity<T: Real>(
    params: &ModelParams<T>,
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
) -> Result<f64, EvalError> {
    corpus_nll(params, examples, batch_size, max_len)?.perplexity()
}
