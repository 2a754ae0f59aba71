use std::sync::Arc;

use super::{assemble_context, ControlSettings, Episode, TextDataError, Vocab, BOS_ID, EOS_ID, PAD_ID};
use crate::imagefeat::{FeatureKind, ImageFeatures, FEATURE_DIM};
use crate::numerics::Tensor;

/// One tokenized training/eval example.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Vec<u32>,
    pub label: Vec<u32>,
    pub image: Option<Arc<ImageFeatures>>,
}

impl Example {
    pub fn from_episode(ep: &Episode, vocab: &Vocab, controls: &ControlSettings) -> Self {
        Self {
            input: vocab.encode(&assemble_context(ep, controls)),
            label: vocab.encode(&ep.label),
            image: None,
        }
    }

    pub fn with_image(mut self, image: Option<Arc<ImageFeatures>>) -> Self {
        self.image = image;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub kind: FeatureKind,
    /// `[B, rows, 2048]`; zeros where `present` is false.
    pub features: Tensor<f32>,
    pub present: Vec<bool>,
}

impl ImageBatch {
    pub fn rows(&self) -> usize {
        self.kind.rows()
    }
}

/// Right-padded token matrices plus masks. Targets are `bos … eos`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch_size: usize,
    pub input_len: usize,
    pub input_ids: Vec<u32>,
    pub input_mask: Vec<bool>,
    pub image: Option<ImageBatch>,
    pub target_len: usize,
    pub target_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
    /// Per position of the image-then-text encoder layout: 1 for image rows,
    /// 0 for text. Text-only batches are all zeros of width `input_len`.
    pub segment_ids: Vec<u8>,
    /// Labels cut to `max_len`.
    pub truncated_labels: usize,
}

/// Builds a batch: inputs keep their most recent `max_len` tokens, labels
/// keep their first `max_len` tokens.
pub fn make_batch(examples: &[Example], max_len: usize) -> Result<Batch, TextDataError> {
    if examples.is_empty() {
        return Err(TextDataError::EmptyBatch);
    }
    if max_len == 0 {
        return Err(TextDataError::Batch("max_len must be positive".into()));
    }
    let b = examples.len();
    let inputs: Vec<&[u32]> = examples
        .iter()
        .map(|e| &e.input[e.input.len().saturating_sub(max_len)..])
        .collect();
    let mut truncated_labels = 0;
    let labels: Vec<&[u32]> = examples
        .iter()
        .map(|e| {
            if e.label.len() > max_len {
                truncated_labels += 1;
            }
            &e.label[..e.label.len().min(max_len)]
        })
        .collect();
    // At least one column so an all-empty context still has a shape.
    let s = inputs.iter().map(|i| i.len()).max().unwrap_or(0).max(1);
    let t = labels.iter().map(|l| l.len()).max().unwrap_or(0) + 2;

    let mut input_ids = vec![PAD_ID; b * s];
    let mut input_mask = vec![false; b * s];
    for (row, inp) in inputs.iter().enumerate() {
        input_ids[row * s..row * s + inp.len()].copy_from_slice(inp);
        input_mask[row * s..row * s + inp.len()].fill(true);
    }
    let mut target_ids = vec![PAD_ID; b * t];
    let mut target_mask = vec![false; b * t];
    for (row, lab) in labels.iter().enumerate() {
        let dst = &mut target_ids[row * t..];
        dst[0] = BOS_ID;
        dst[1..1 + lab.len()].copy_from_slice(lab);
        dst[1 + lab.len()] = EOS_ID;
        target_mask[row * t..row * t + lab.len() + 2].fill(true);
    }

    let image = image_batch(examples)?;
    let rows = image.as_ref().map_or(0, ImageBatch::rows);
    let mut segment_ids = Vec::with_capacity(b * (rows + s));
    for _ in 0..b {
        segment_ids.extend(std::iter::repeat_n(1u8, rows));
        segment_ids.extend(std::iter::repeat_n(0u8, s));
    }
    Ok(Batch {
        batch_size: b,
        input_len: s,
        input_ids,
        input_mask,
        image,
        target_len: t,
        target_ids,
        target_mask,
        segment_ids,
        truncated_labels,
    })
}

fn image_batch(examples: &[Example]) -> Result<Option<ImageBatch>, TextDataError> {
    let Some(kind) = examples.iter().find_map(|e| e.image.as_ref().map(|f| f.kind)) else {
        return Ok(None);
    };
    let rows = kind.rows();
    let block = rows * FEATURE_DIM;
    let mut data = vec![0f32; examples.len() * block];
    let mut present = vec![false; examples.len()];
    for (i, e) in examples.iter().enumerate() {
        if let Some(f) = &e.image {
            if f.kind != kind {
                return Err(TextDataError::Batch(format!(
                    "mixed feature kinds in one batch: {kind} and {}",
                    f.kind
                )));
            }
            data[i * block..(i + 1) * block].copy_from_slice(f.matrix().data());
            present[i] = true;
        }
    }
    Ok(Some(ImageBatch {
        kind,
        features: Tensor::new(vec![examples.len(), rows, FEATURE_DIM], data)
            .map_err(|e| TextDataError::Batch(e.to_string()))?,
        present,
    }))
}

impl Batch {
    /// Same batch with extra pad columns on inputs and targets.
    pub fn pad_to(&self, input_len: usize, target_len: usize) -> Batch {
        assert!(input_len >= self.input_len && target_len >= self.target_len);
        let widen = |ids: &[u32], mask: &[bool], old: usize, new: usize| {
            let mut out_ids = vec![PAD_ID; self.batch_size * new];
            let mut out_mask = vec![false; self.batch_size * new];
            for r in 0..self.batch_size {
                out_ids[r * new..r * new + old].copy_from_slice(&ids[r * old..(r + 1) * old]);
                out_mask[r * new..r * new + old].copy_from_slice(&mask[r * old..(r + 1) * old]);
            }
            (out_ids, out_mask)
        };
        let (input_ids, input_mask) = widen(&self.input_ids, &self.input_mask, self.input_len, input_len);
        let (target_ids, target_mask) =
            widen(&self.target_ids, &self.target_mask, self.target_len, target_len);
        let rows = self.image.as_ref().map_or(0, ImageBatch::rows);
        let mut segment_ids = Vec::new();
        for _ in 0..self.batch_size {
            segment_ids.extend(std::iter::repeat_n(1u8, rows));
            segment_ids.extend(std::iter::repeat_n(0u8, input_len));
        }
        Batch {
            input_len,
            input_ids,
            input_mask,
            target_len,
            target_ids,
            target_mask,
            segment_ids,
            ..self.clone()
        }
    }

    /// Drops image features (the no-image ablation).
    pub fn without_images(mut self) -> Batch {
        if self.image.take().is_some() {
            self.segment_ids = vec![0; self.batch_size * self.input_len];
        }
        self
    }

    /// Number of supervised target positions (everything after `bos`).
    pub fn target_tokens(&self) -> usize {
        (0..self.batch_size)
            .map(|r| {
                self.target_mask[r * self.target_len..(r + 1) * self.target_len]
                    .iter()
                    .filter(|&&m| m)
                    .count()
                    .saturating_sub(1)
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagefeat::synth_features;

    fn ex(input: &[u32], label: &[u32]) -> Example {
        Example {
            input: input.to_vec(),
            label: label.to_vec(),
            image: None,
        }
    }

    #[test]
    fn pads_to_longest() {
        let b = make_batch(&[ex(&[20, 21, 22], &[30]), ex(&[20, 21, 22, 23, 24], &[31, 32])], 64).unwrap();
        assert_eq!(b.input_len, 5);
        let sums: Vec<usize> = b.input_mask.chunks(5).map(|r| r.iter().filter(|&&m| m).count()).collect();
        assert_eq!(sums, vec![3, 5]);
        assert_eq!(b.target_len, 4);
        assert_eq!(&b.target_ids[..4], &[BOS_ID, 30, EOS_ID, PAD_ID]);
        assert_eq!(&b.target_ids[4..], &[BOS_ID, 31, 32, EOS_ID]);
        assert_eq!(b.target_tokens(), 5);
        assert!(b.image.is_none());
        assert_eq!(b.segment_ids, vec![0; 10]);
    }

    #[test]
    fn empty_batch_is_error() {
        assert_eq!(make_batch(&[], 8).unwrap_err(), TextDataError::EmptyBatch);
    }

    #[test]
    fn truncation_keeps_recent_context_and_label_head() {
        let input: Vec<u32> = (100..110).collect();
        let label: Vec<u32> = (200..212).collect();
        let b = make_batch(&[ex(&input, &label)], 8).unwrap();
        assert_eq!(b.input_ids, (102..110).collect::<Vec<_>>());
        assert_eq!(b.truncated_labels, 1);
        assert_eq!(&b.target_ids[1..9], &(200..208).collect::<Vec<_>>()[..]);
        assert_eq!(b.target_ids[9], EOS_ID);
    }

    #[test]
    fn images_and_segments() {
        let f = Arc::new(synth_features("i", FeatureKind::Global, 0));
        let b = make_batch(
            &[ex(&[20], &[30]).with_image(Some(f.clone())), ex(&[20, 21], &[30])],
            8,
        )
        .unwrap();
        let img = b.image.as_ref().unwrap();
        assert_eq!(img.present, vec![true, false]);
        assert_eq!(img.features.shape(), &[2, 1, FEATURE_DIM]);
        assert_eq!(b.segment_ids, vec![1, 0, 0, 1, 0, 0]);
        let stripped = b.without_images();
        assert!(stripped.image.is_none());
        assert_eq!(stripped.segment_ids, vec![0; 4]);
    }

    #[test]
    fn mixed_kinds_rejected() {
        let g = Arc::new(synth_features("i", FeatureKind::Global, 0));
        let s = Arc::new(synth_features("i", FeatureKind::Spatial, 0));
        let err = make_batch(&[ex(&[20], &[30]).with_image(Some(g)), ex(&[20], &[30]).with_image(Some(s))], 8);
        assert!(matches!(err, Err(TextDataError::Batch(_))));
    }
}
