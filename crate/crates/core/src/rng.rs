//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) seeded
//! through `SeedableRng::seed_from_u64`. Independent purposes draw from
//! independent streams whose seeds are derived from one top-level seed as
//! `seed + 1000 * purpose_id` (wrapping). The word position of a ChaCha
//! stream is its cursor; a `(seed, word_pos)` pair restores a stream exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// What a random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Init = 1,
    Masking = 2,
    Data = 3,
    Probe = 4,
}

impl Purpose {
    pub fn id(self) -> u64 {
        self as u64
    }
}

/// Sub-seed for a purpose: `seed + 1000 * purpose_id`.
pub fn sub_seed(seed: u64, purpose: Purpose) -> u64 {
    seed.wrapping_add(1000u64.wrapping_mul(purpose.id()))
}

pub fn stream(seed: u64, purpose: Purpose) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, purpose))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Serializable position of a stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngCursor {
    pub fn capture(seed: u64, rng: &Rng) -> Self {
        RngCursor {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> crate::Result<Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Integrity(format!("bad rng cursor {:?}", self.word_pos)))?;
        let mut rng = Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn sub_seeds_are_spaced_by_purpose() {
        assert_eq!(sub_seed(7, Purpose::Init), 1007);
        assert_eq!(sub_seed(7, Purpose::Masking), 2007);
        assert_eq!(sub_seed(7, Purpose::Data), 3007);
    }

    #[test]
    fn cursor_restores_stream() {
        let mut rng = stream(11, Purpose::Data);
        for _ in 0..37 {
            rng.gen::<u64>();
        }
        let cursor = RngCursor::capture(sub_seed(11, Purpose::Data), &rng);
        let mut back = cursor.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
        }
    }
}
