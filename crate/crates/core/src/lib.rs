pub mod control_safety;
pub mod decode;
pub mod eval_metrics;
pub mod imagefeat;
pub mod model;
pub mod numerics;
pub mod serve;
pub mod textdata;
pub mod train;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
