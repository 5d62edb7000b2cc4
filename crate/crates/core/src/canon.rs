// SPDX-License-Identifier: Apache-2.0

//! Canonical byte serialization for state digests.
//!
//! All digestable state is folded through this writer with fixed-width
//! little-endian fields in declaration order, so that identical states
//! always produce identical digests, on any platform.

use crate::types::Digest;
use sha2::{Digest as _, Sha256};

pub struct Canon {
    hasher: Sha256,
}

impl Canon {
    pub fn new(tag: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(tag.as_bytes());
        Canon { hasher }
    }

    pub fn u8(&mut self, v: u8) {
        self.hasher.update([v]);
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn u16(&mut self, v: u16) {
        self.hasher.update(v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.hasher.update(v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.hasher.update(v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.hasher.update(v);
    }

    pub fn digest(&mut self, d: &Digest) {
        self.hasher.update(d.0);
    }

    pub fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                self.u64(x);
            }
        }
    }

    pub fn finish(self) -> Digest {
        Digest(self.hasher.finalize().into())
    }
}
