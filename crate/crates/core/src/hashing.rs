use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Hashes a sequence of fields with length prefixes so that field
/// boundaries cannot be shifted to produce a collision.
pub(crate) struct FieldHasher(Sha256);

impl FieldHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = FieldHasher(Sha256::new());
        h.field(domain.as_bytes());
        h
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn optional(&mut self, bytes: Option<&[u8]>) -> &mut Self {
        match bytes {
            None => self.0.update([0u8]),
            Some(b) => {
                self.0.update([1u8]);
                self.field(b);
            }
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}
