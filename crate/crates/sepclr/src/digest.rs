//! SHA-256 digests for config provenance and dataset idempotency checks.

use sha2::{Digest, Sha256};

/// Hex digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Incremental digest over several labelled parts (order-sensitive).
pub struct MultiDigest {
    inner: Sha256,
}

impl MultiDigest {
    pub fn new() -> Self {
        Self { inner: Sha256::new() }
    }

    pub fn add(&mut self, label: &str, bytes: &[u8]) {
        self.inner.update(label.as_bytes());
        self.inner.update([0u8]);
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
    }

    pub fn finish(self) -> String {
        hex(&self.inner.finalize())
    }
}

impl Default for MultiDigest {
    fn default() -> Self {
        Self::new()
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        // sha256 of the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn multi_digest_is_order_sensitive() {
        let mut a = MultiDigest::new();
        a.add("x", b"1");
        a.add("y", b"2");
        let mut b = MultiDigest::new();
        b.add("y", b"2");
        b.add("x", b"1");
        assert_ne!(a.finish(), b.finish());
    }
}
