//! Checkpoint file: 8-byte magic, little-endian `u64` header length, JSON
//! header, then every parameter as little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_manifest, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;
use crate::sha256_hex;
use crate::textdata::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMBCKPT1";
const FORMAT_VERSION: u32 = 1;
/// Headers beyond this are rejected before allocation.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob in `f32` elements.
    pub offset: usize,
}

/// One training stage that contributed to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// SHA-256 of the parameter blob this stage produced.
    pub blob_sha256: String,
    pub steps: usize,
    pub best_val_ppl: Option<f64>,
    pub lr: f64,
    pub seed: u64,
    pub datasets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub params: Vec<ManifestEntry>,
    pub blob_len: usize,
    pub blob_sha256: String,
    pub provenance: Vec<StageRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn vocab(&self) -> &Vocab {
        &self.header.vocab
    }
}

fn blob_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_params() * 4);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the little-endian parameter blob.
pub fn params_sha256(params: &ModelParams<f32>) -> String {
    sha256_hex(&blob_bytes(params))
}

/// Writes a checkpoint (via a temporary file and rename) and returns its
/// header.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    vocab: &Vocab,
    provenance: &[StageRecord],
) -> Result<CheckpointHeader, ModelError> {
    if params.config.vocab_size != vocab.len() {
        return Err(ModelError::Checkpoint(format!(
            "model vocab_size {} but vocabulary has {} entries",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    let blob = blob_bytes(params);
    let mut offset = 0;
    let manifest = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        params: manifest,
        blob_len: offset,
        blob_sha256: sha256_hex(&blob),
        provenance: provenance.to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&blob)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(header)
}

fn read_header(r: &mut impl Read) -> Result<CheckpointHeader, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint("file shorter than the magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| ModelError::Checkpoint("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(ModelError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.vocab.hash() != header.vocab_hash {
        return Err(ModelError::Checkpoint("vocabulary hash mismatch".into()));
    }
    if header.vocab.len() != header.config.vocab_size {
        return Err(ModelError::Checkpoint(format!(
            "config vocab_size {} but vocabulary has {} entries",
            header.config.vocab_size,
            header.vocab.len()
        )));
    }
    header.config.validate()?;
    Ok(header)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    read_header(&mut BufReader::new(File::open(path)?))
}

/// Loads and validates a checkpoint. With `expected`, the stored config must
/// match it exactly; this is checked before the weights are read.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(ModelError::ConfigMismatch(format!(
                "stored {}x{} layers d={} heads={} fusion={} kind={}, expected {}x{} layers d={} heads={} fusion={} kind={}",
                header.config.n_enc_layers,
                header.config.n_dec_layers,
                header.config.d_model,
                header.config.n_heads,
                header.config.fusion,
                header.config.feature_kind,
                want.n_enc_layers,
                want.n_dec_layers,
                want.d_model,
                want.n_heads,
                want.fusion,
                want.feature_kind,
            )));
        }
    }
    let manifest = param_manifest(&header.config);
    let mut offset = 0;
    if manifest.len() != header.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            header.params.len(),
            manifest.len()
        )));
    }
    for ((name, shape), entry) in manifest.iter().zip(&header.params) {
        if *name != entry.name || *shape != entry.shape || entry.offset != offset {
            return Err(ModelError::Checkpoint(format!(
                "manifest entry `{}` {:?} at {} does not match `{name}` {shape:?} at {offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        offset += shape.iter().product::<usize>();
    }
    if offset != header.blob_len {
        return Err(ModelError::Checkpoint(format!(
            "blob_len {} but manifest covers {offset}",
            header.blob_len
        )));
    }
    let mut blob = Vec::with_capacity(offset * 4);
    r.read_to_end(&mut blob)?;
    if blob.len() != offset * 4 {
        return Err(ModelError::Checkpoint(format!(
            "blob holds {} bytes, manifest needs {}",
            blob.len(),
            offset * 4
        )));
    }
    if sha256_hex(&blob) != header.blob_sha256 {
        return Err(ModelError::Checkpoint("blob hash mismatch".into()));
    }
    let mut named = Vec::with_capacity(manifest.len());
    for ((name, shape), entry) in manifest.into_iter().zip(&header.params) {
        let n: usize = shape.iter().product();
        let bytes = &blob[entry.offset * 4..(entry.offset + n) * 4];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let params = ModelParams::from_tensors(&header.config, named)?;
    Ok(Checkpoint { header, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Fusion;
    use crate::imagefeat::FeatureKind;

    fn small() -> ModelConfig {
        ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: Vocab::bytes_only().len(),
            max_positions: 16,
            fusion: Fusion::Late,
            feature_kind: FeatureKind::Global,
            dropout: 0.0,
            image_positions: true,
            late_pooled: false,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&small(), 9).unwrap();
        let vocab = Vocab::bytes_only();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &p, &vocab, &[]).unwrap();
        let loaded = load_checkpoint(&a, Some(&small())).unwrap();
        assert_eq!(loaded.params.max_abs_diff(&p), 0.0);
        save_checkpoint(&b, &loaded.params, loaded.vocab(), &loaded.header.provenance).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_other_config_before_reading_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&small(), 9).unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &p, &Vocab::bytes_only(), &[]).unwrap();
        let mut other = small();
        other.d_model = 16;
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(ModelError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&small(), 9).unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &p, &Vocab::bytes_only(), &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("blob holds"), "{err}");
    }

    #[test]
    fn flipped_weight_fails_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&small(), 9).unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &p, &Vocab::bytes_only(), &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTACKPT\0\0\0\0\0\0\0\0").unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
