//! Seeded randomness. Every stochastic component derives its stream from a
//! single root seed so runs are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeedRng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable sub-seed derivation: hash of (root seed, label). Keeps module
/// init streams independent of each other and of consumption order.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Serializable snapshot of a training RNG stream.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &SeedRng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> crate::error::Result<SeedRng> {
        if self.seed_hex.len() != 64 {
            return Err(crate::error::Error::Checkpoint(
                "rng seed must be 32 bytes hex".to_string(),
            ));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| crate::error::Error::Checkpoint(format!("bad rng seed hex: {e}")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        let a = derive_seed(42, "backbone");
        let b = derive_seed(42, "backbone");
        let c = derive_seed(42, "spm");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rng_state_roundtrips_mid_stream() {
        let mut rng = rng_from(7);
        for _ in 0..13 {
            let _: f32 = rng.random();
        }
        let snap = RngState::capture(&rng);
        let tail: Vec<f32> = (0..8).map(|_| rng.random()).collect();
        let mut restored = snap.restore().unwrap();
        let tail2: Vec<f32> = (0..8).map(|_| restored.random()).collect();
        assert_eq!(tail, tail2);
    }
}
