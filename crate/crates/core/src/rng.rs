//! Independent, reproducible random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so Bob's channel, each Eve's channel, initialisation and
//! shuffling never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    EncoderInit,
    DecoderInit,
    AdversaryInit(usize),
    CollusionInit,
    Shuffle,
    BobChannel,
    EveChannel(usize),
    EvalBob,
    EvalEve(usize),
    Synthetic,
}

impl Stream {
    fn code(self) -> u64 {
        let (kind, index) = match self {
            Stream::EncoderInit => (1, 0),
            Stream::DecoderInit => (2, 0),
            Stream::AdversaryInit(m) => (3, m),
            Stream::CollusionInit => (4, 0),
            Stream::Shuffle => (5, 0),
            Stream::BobChannel => (6, 0),
            Stream::EveChannel(m) => (7, m),
            Stream::EvalBob => (8, 0),
            Stream::EvalEve(m) => (9, m),
            Stream::Synthetic => (10, 0),
        };
        (kind << 32) | index as u64
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The stream for `purpose` during `epoch` of a run seeded with `seed`.
pub fn stream(seed: u64, purpose: Stream, epoch: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch)));
    rng.set_stream(purpose.code());
    rng
}
