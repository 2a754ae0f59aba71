use super::{beam_search, BeamConfig, BeamOutput, DecodeError, StepModel};
use crate::model::{encode_tensor, DecoderState, EncoderInput, ModelParams};
use crate::numerics::kernels::log_softmax_f64;
use crate::numerics::{Real, Tensor};
use crate::textdata::{make_batch, Example, BOS_ID, EOS_ID};

/// [`StepModel`] over the transformer decoder with a key/value cache that
/// follows the beam's parent pointers.
pub struct TransformerStepper<'p, T: Real = f32> {
    params: &'p ModelParams<T>,
    state: DecoderState<T>,
}

impl<'p, T: Real> TransformerStepper<'p, T> {
    /// `memory` is the encoder output `[B, M, d]` for the example(s) being
    /// decoded; beams start from element 0.
    pub fn new(params: &'p ModelParams<T>, memory: &Tensor<T>, memory_mask: &[bool]) -> Result<Self, DecodeError> {
        Ok(Self {
            params,
            state: DecoderState::new(params, memory, memory_mask)?,
        })
    }
}

impl<T: Real> StepModel for TransformerStepper<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn eos_id(&self) -> u32 {
        EOS_ID
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<u32>], parents: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError> {
        if prefixes.len() != parents.len() {
            return Err(DecodeError::StepShape {
                got: parents.len(),
                want: prefixes.len(),
            });
        }
        let identity = parents.len() == self.state.batch() && parents.iter().enumerate().all(|(i, &p)| i == p);
        if !identity {
            self.state.reorder(parents, self.params.config.n_heads)?;
        }
        for p in prefixes {
            if p.len() != self.state.steps() {
                return Err(DecodeError::Config(format!(
                    "prefix of length {} after {} decoder steps",
                    p.len(),
                    self.state.steps()
                )));
            }
        }
        let tokens: Vec<u32> = prefixes.iter().map(|p| p.last().copied().unwrap_or(BOS_ID)).collect();
        let logits = self.state.step(self.params, &tokens)?;
        let v = self.params.config.vocab_size;
        Ok(logits.data().chunks(v).map(log_softmax_f64).collect())
    }
}

/// Encodes one example and beam-decodes a reply. Context blocking uses the
/// tokens the encoder actually sees.
pub fn generate<T: Real>(params: &ModelParams<T>, example: &Example, cfg: &BeamConfig) -> Result<BeamOutput, DecodeError> {
    if cfg.max_length > params.config.max_positions {
        return Err(DecodeError::Config(format!(
            "max_length {} exceeds the model's {} positions",
            cfg.max_length, params.config.max_positions
        )));
    }
    let single = Example {
        label: Vec::new(),
        ..example.clone()
    };
    let batch = make_batch(std::slice::from_ref(&single), params.config.max_positions)?;
    let (memory, mask) = encode_tensor(params, &EncoderInput::from_batch(&batch))?;
    let context: Vec<u32> = batch
        .input_ids
        .iter()
        .zip(&batch.input_mask)
        .filter(|(_, &m)| m)
        .map(|(&t, _)| t)
        .collect();
    let mut stepper = TransformerStepper::new(params, &memory, &mask)?;
    beam_search(&mut stepper, &context, cfg)
}
