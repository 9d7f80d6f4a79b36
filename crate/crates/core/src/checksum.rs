//! 64-bit FNV-1a, used for wire checksums, file checksums and config fingerprints.

use std::hash::Hasher;

use fnv::FnvHasher;

#[derive(Default)]
pub struct Fnv1a(FnvHasher);

impl Fnv1a {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.write(bytes);
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}
