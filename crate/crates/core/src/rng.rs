//! Named deterministic random streams.
//!
//! Every stochastic operation draws from exactly one stream, so changing how
//! much randomness one concern consumes (say, a new augmentation policy) does
//! not shift the values seen by another (masking, data order).

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Shuffling of labeled/unlabeled index orders.
    DataOrder,
    /// Weak and strong augmentation draws.
    Augmentation,
    /// Patch masking in the reconstruction branch.
    Masking,
    /// Dropout masks in train-mode forwards.
    Dropout,
}

impl Stream {
    pub const ALL: [Stream; 5] = [
        Stream::Init,
        Stream::DataOrder,
        Stream::Augmentation,
        Stream::Masking,
        Stream::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Init => "init",
            Stream::DataOrder => "data_order",
            Stream::Augmentation => "augmentation",
            Stream::Masking => "masking",
            Stream::Dropout => "dropout",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Serializable position of one stream: key, stream id and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub name: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStreams {
    streams: [ChaCha8Rng; 5],
}

impl RngStreams {
    /// All streams share one ChaCha key derived from `seed` and differ by
    /// stream id.
    pub fn new(seed: u64) -> Self {
        let make = |s: Stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s.index() as u64 + 1);
            rng
        };
        Self {
            streams: Stream::ALL.map(make),
        }
    }

    pub fn get(&mut self, stream: Stream) -> &mut ChaCha8Rng {
        &mut self.streams[stream.index()]
    }

    pub fn snapshot(&self) -> Vec<StreamState> {
        Stream::ALL
            .iter()
            .map(|&s| {
                let rng = &self.streams[s.index()];
                StreamState {
                    name: s.name().to_string(),
                    seed: rng.get_seed(),
                    stream: rng.get_stream(),
                    word_pos: rng.get_word_pos(),
                }
            })
            .collect()
    }

    pub fn restore(states: &[StreamState]) -> Result<Self> {
        let mut out = Self::new(0);
        for s in Stream::ALL {
            let state = states
                .iter()
                .find(|st| st.name == s.name())
                .ok_or_else(|| Error::Data(alloc::format!("missing rng stream `{}`", s.name())))?;
            let mut rng = ChaCha8Rng::from_seed(state.seed);
            rng.set_stream(state.stream);
            rng.set_word_pos(state.word_pos);
            out.streams[s.index()] = rng;
        }
        Ok(out)
    }
}

/// Standard normal draw (Box-Muller).
pub(crate) fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
        }
    }
}

/// Normal(0, std) truncated to two standard deviations by rejection.
pub(crate) fn trunc_normal<R: rand::Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
