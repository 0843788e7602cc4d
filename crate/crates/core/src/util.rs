use std::sync::{Condvar, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a list of byte strings. Stable across
/// platforms and releases, unlike `std::hash`.
pub(crate) fn stable_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub(crate) fn seeded_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_seed(parts))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Counting semaphore with a high-water mark.
pub(crate) struct Limiter {
    state: Mutex<LimiterState>,
    available: Condvar,
    capacity: usize,
}

struct LimiterState {
    in_flight: usize,
    peak: usize,
}

pub(crate) struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub(crate) fn new(capacity: usize) -> Self {
        Limiter {
            state: Mutex::new(LimiterState { in_flight: 0, peak: 0 }),
            available: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().unwrap();
        while state.in_flight >= self.capacity {
            state = self.available.wait(state).unwrap();
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        Permit(self)
    }

    pub(crate) fn peak(&self) -> usize {
        self.state.lock().unwrap().peak
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.0.state.lock().unwrap();
        state.in_flight -= 1;
        self.0.available.notify_one();
    }
}
