//! Small helpers: deterministic hashing for fingerprints and config hashes.

/// FNV-1a over a byte stream. Used for data fingerprints and config hashes;
/// stable across platforms and releases, unlike `DefaultHasher`.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
        self
    }

    pub fn update_u64(&mut self, v: u64) -> &mut Self {
        self.update(&v.to_le_bytes())
    }

    pub fn update_f64(&mut self, v: f64) -> &mut Self {
        self.update(&v.to_le_bytes())
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Fingerprint of an `f64` matrix: dimensions plus a strided sample of
/// entries. Cheap even for 200k-row matrices while still catching any
/// realistic change of mapping or vocabulary.
pub fn matrix_fingerprint(rows: usize, cols: usize, data: &[f64]) -> u64 {
    let mut h = Fnv1a::new();
    h.update_u64(rows as u64).update_u64(cols as u64);
    let stride = (data.len() / 4096).max(1);
    for i in (0..data.len()).step_by(stride) {
        h.update_f64(data[i]);
    }
    if let Some(&last) = data.last() {
        h.update_f64(last);
    }
    h.finish()
}
