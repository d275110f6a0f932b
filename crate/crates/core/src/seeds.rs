//! Deterministic splitting of one master seed into per-component seeds.

use crate::binio::checksum64;

/// Seed for the component named `label`, derived from `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    checksum64(&bytes)
}
