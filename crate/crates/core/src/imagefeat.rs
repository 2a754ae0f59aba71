//! Frozen image features: the on-disk store, a deterministic synthetic
//! generator, and the trainable projection into the model dimension.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MMFEAT01"            8 bytes
//! kind                  u8   (0 = global, 1 = spatial, 2 = region)
//! entry count           u32
//! per entry:
//!   id length           u16
//!   id                  UTF-8 bytes
//!   matrix              rows × 2048 f32, row-major
//! ```
//!
//! Spatial 7×7 grids are flattened row-major into 49 rows. A sidecar
//! `<file>.idx` (JSON) caches the id → offset index and is rebuilt when
//! missing or stale.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Tensor, Var};

pub const FEATURE_DIM: usize = 2048;
pub const MAGIC: &[u8; 8] = b"MMFEAT01";
const HEADER_LEN: u64 = 13;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image `{0}` not found in feature store")]
    NotFound(String),
    #[error("feature file format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("expected {expected:?} features, got {actual:?}")]
    KindMismatch {
        expected: FeatureKind,
        actual: FeatureKind,
    },
    #[error("feature matrix for `{id}` has shape {shape:?}, kind {kind:?} needs [{rows}, 2048]")]
    Shape {
        id: String,
        kind: FeatureKind,
        rows: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value in features for `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// One pooled 2048-d vector.
    Global,
    /// 7×7 grid of 2048-d cells.
    Spatial,
    /// 100 detected regions of 2048-d each.
    Region,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Global, FeatureKind::Spatial, FeatureKind::Region];

    pub fn rows(self) -> usize {
        match self {
            FeatureKind::Global => 1,
            FeatureKind::Spatial => 49,
            FeatureKind::Region => 100,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Global => 0,
            FeatureKind::Spatial => 1,
            FeatureKind::Region => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(FeatureKind::Global),
            "spatial" => Ok(FeatureKind::Spatial),
            "region" => Ok(FeatureKind::Region),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureKind::Global => "global",
            FeatureKind::Spatial => "spatial",
            FeatureKind::Region => "region",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub kind: FeatureKind,
    pub image_id: String,
    matrix: Tensor<f32>,
}

impl ImageFeatures {
    pub fn new(kind: FeatureKind, image_id: impl Into<String>, matrix: Tensor<f32>) -> Result<Self, FeatureError> {
        let image_id = image_id.into();
        if matrix.shape() != [kind.rows(), FEATURE_DIM] {
            return Err(FeatureError::Shape {
                id: image_id,
                kind,
                rows: kind.rows(),
                shape: matrix.shape().to_vec(),
            });
        }
        if !matrix.all_finite() {
            return Err(FeatureError::NonFinite(image_id));
        }
        Ok(Self {
            kind,
            image_id,
            matrix,
        })
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.kind.rows()
    }
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-0.5, 0.5), exactly representable in f32.
    fn centered(&mut self) -> f32 {
        (self.next() >> 40) as f32 / 16_777_216.0 - 0.5
    }
}

/// Deterministic stand-in features keyed by `(image_id, seed)`.
///
/// Each value is a scaled sum of four uniforms (roughly unit variance),
/// generated with integer hashing and exact float steps only, so matrices
/// are identical across runs and platforms.
pub fn synth_features(image_id: &str, kind: FeatureKind, seed: u64) -> ImageFeatures {
    let mut h = fnv1a(image_id.as_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(&seed.to_le_bytes(), h);
    h = fnv1a(&[kind.code()], h);
    let mut rng = SplitMix64(h);
    let n = kind.rows() * FEATURE_DIM;
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let s = rng.centered() + rng.centered() + rng.centered() + rng.centered();
            s * 1.732_050_8
        })
        .collect();
    ImageFeatures {
        kind,
        image_id: image_id.to_string(),
        matrix: Tensor::new(vec![kind.rows(), FEATURE_DIM], data).expect("fixed shape"),
    }
}

/// Affine projection of a `[B, rows, 2048]` feature block to `[B, rows, d]`.
/// The features enter as whatever var the caller built; the model always
/// passes a constant, so they never receive gradient.
pub fn project<'g, T: Real>(
    features: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Var<'g, T>,
) -> Result<Var<'g, T>, NumericsError> {
    features.matmul(weight)?.add_broadcast(bias)
}

/// Writes a feature file. All entries must share `kind`.
pub fn write_features(path: &Path, kind: FeatureKind, entries: &[ImageFeatures]) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[kind.code()])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        if e.kind != kind {
            return Err(FeatureError::KindMismatch {
                expected: kind,
                actual: e.kind,
            });
        }
        let id = e.image_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| FeatureError::Format {
            offset: 0,
            detail: format!("image id of {} bytes exceeds u16", id.len()),
        })?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        for v in e.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    let _ = std::fs::remove_file(sidecar_path(path));
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    file_len: u64,
    kind: FeatureKind,
    entries: Vec<(String, u64)>,
}

/// Read-only random access to a feature file. Lookups open their own file
/// handle, so a store can be shared across threads.
#[derive(Debug)]
pub struct FeatureStore {
    path: PathBuf,
    kind: FeatureKind,
    ids: Vec<String>,
    index: HashMap<String, u64>,
}

impl FeatureStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let path = path.as_ref().to_path_buf();
        let file_len = std::fs::metadata(&path)?.len();
        let kind = read_header(&mut File::open(&path)?)?.0;
        if let Some(store) = Self::from_sidecar(&path, file_len, kind) {
            return Ok(store);
        }
        let entries = scan(&path, file_len)?;
        let sidecar = Sidecar {
            file_len,
            kind,
            entries,
        };
        // The sidecar is a cache; a read-only directory just means we rescan
        // next time.
        if let Ok(json) = serde_json::to_vec(&sidecar) {
            let _ = std::fs::write(sidecar_path(&path), json);
        }
        Ok(Self::from_entries(path, kind, sidecar.entries))
    }

    fn from_sidecar(path: &Path, file_len: u64, kind: FeatureKind) -> Option<Self> {
        let bytes = std::fs::read(sidecar_path(path)).ok()?;
        let sc: Sidecar = serde_json::from_slice(&bytes).ok()?;
        if sc.file_len != file_len || sc.kind != kind {
            return None;
        }
        Some(Self::from_entries(path.to_path_buf(), kind, sc.entries))
    }

    fn from_entries(path: PathBuf, kind: FeatureKind, entries: Vec<(String, u64)>) -> Self {
        let ids = entries.iter().map(|(id, _)| id.clone()).collect();
        let index = entries.into_iter().collect();
        Self {
            path,
            kind,
            ids,
            index,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    /// Image ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn load(&self, image_id: &str) -> Result<ImageFeatures, FeatureError> {
        let &offset = self
            .index
            .get(image_id)
            .ok_or_else(|| FeatureError::NotFound(image_id.to_string()))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(offset))?;
        let n = self.kind.rows() * FEATURE_DIM;
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf).map_err(|_| FeatureError::Format {
            offset,
            detail: "matrix truncated".into(),
        })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ImageFeatures::new(
            self.kind,
            image_id,
            Tensor::new(vec![self.kind.rows(), FEATURE_DIM], data)?,
        )
    }
}

/// Convenience wrapper over [`FeatureStore::load`].
pub fn load_features(store: &FeatureStore, image_id: &str) -> Result<ImageFeatures, FeatureError> {
    store.load(image_id)
}

/// In-memory features of one kind, keyed by image id, in insertion order.
#[derive(Clone, Debug)]
pub struct ImageBank {
    kind: FeatureKind,
    ids: Vec<String>,
    map: HashMap<String, Arc<ImageFeatures>>,
}

impl ImageBank {
    pub fn new(kind: FeatureKind) -> Self {
        Self {
            kind,
            ids: Vec::new(),
            map: HashMap::new(),
        }
    }

    /// Loads every entry of `store`.
    pub fn from_store(store: &FeatureStore) -> Result<Self, FeatureError> {
        let mut bank = Self::new(store.kind());
        for id in store.ids() {
            bank.insert(store.load(id)?)?;
        }
        Ok(bank)
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, features: ImageFeatures) -> Result<(), FeatureError> {
        if features.kind != self.kind {
            return Err(FeatureError::KindMismatch {
                expected: self.kind,
                actual: features.kind,
            });
        }
        let id = features.image_id.clone();
        if self.map.insert(id.clone(), Arc::new(features)).is_none() {
            self.ids.push(id);
        }
        Ok(())
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn get(&self, image_id: &str) -> Option<&Arc<ImageFeatures>> {
        self.map.get(image_id)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All entries in insertion order.
    pub fn entries(&self) -> Vec<ImageFeatures> {
        self.ids.iter().map(|id| (*self.map[id]).clone()).collect()
    }
}

fn read_header(r: &mut impl Read) -> Result<(FeatureKind, u32), FeatureError> {
    let mut head = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut head).map_err(|_| FeatureError::Format {
        offset: 0,
        detail: "header truncated".into(),
    })?;
    if &head[..8] != MAGIC {
        return Err(FeatureError::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let kind = FeatureKind::from_code(head[8]).ok_or_else(|| FeatureError::Format {
        offset: 8,
        detail: format!("unknown kind byte {}", head[8]),
    })?;
    let count = u32::from_le_bytes([head[9], head[10], head[11], head[12]]);
    Ok((kind, count))
}

/// Walks the file and returns `(id, matrix offset)` per entry.
fn scan(path: &Path, file_len: u64) -> Result<Vec<(String, u64)>, FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let (kind, count) = read_header(&mut r)?;
    let matrix_bytes = (kind.rows() * FEATURE_DIM * 4) as u64;
    let mut offset = HEADER_LEN;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|_| FeatureError::Format {
            offset,
            detail: "entry header truncated".into(),
        })?;
        let id_len = u16::from_le_bytes(len) as u64;
        let mut id = vec![0u8; id_len as usize];
        r.read_exact(&mut id).map_err(|_| FeatureError::Format {
            offset: offset + 2,
            detail: "image id truncated".into(),
        })?;
        let id = String::from_utf8(id).map_err(|_| FeatureError::Format {
            offset: offset + 2,
            detail: "image id is not UTF-8".into(),
        })?;
        let data_at = offset + 2 + id_len;
        if data_at + matrix_bytes > file_len {
            return Err(FeatureError::Format {
                offset: data_at,
                detail: format!("matrix for `{id}` truncated"),
            });
        }
        r.seek_relative(matrix_bytes as i64)?;
        entries.push((id, data_at));
        offset = data_at + matrix_bytes;
    }
    Ok(entries)
}
