use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Bag;
use crate::Error;

/// Frames dropped at each end of a video (titles and credits).
pub const EDGE_EXCLUSION: usize = 15;

/// How frames are drawn from a bag during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplingScheme {
    /// `count` indices drawn uniformly with replacement, in draw order.
    RandomWithReplacement(usize),
    /// Every fifth eligible frame.
    OneInFive,
}

impl FromStr for SamplingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "one-in-five" {
            return Ok(SamplingScheme::OneInFive);
        }
        let count = s
            .strip_prefix("random:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "sampling scheme must be `random:N` (N >= 1) or `one-in-five`, got `{s}`"
                ))
            })?;
        Ok(SamplingScheme::RandomWithReplacement(count))
    }
}

impl TryFrom<String> for SamplingScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<SamplingScheme> for String {
    fn from(s: SamplingScheme) -> String {
        s.to_string()
    }
}

impl fmt::Display for SamplingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingScheme::RandomWithReplacement(n) => write!(f, "random:{n}"),
            SamplingScheme::OneInFive => f.write_str("one-in-five"),
        }
    }
}

/// Frame indices a sampler may draw from. Bags of 30 frames or fewer keep every frame.
pub fn eligible_range(num_frames: usize) -> Range<usize> {
    if num_frames > 2 * EDGE_EXCLUSION {
        EDGE_EXCLUSION..num_frames - EDGE_EXCLUSION
    } else {
        0..num_frames
    }
}

pub fn sample_frames(bag: &Bag, scheme: SamplingScheme, seed: u64) -> Vec<usize> {
    let range = eligible_range(bag.num_frames());
    match scheme {
        SamplingScheme::OneInFive => range.step_by(5).collect(),
        SamplingScheme::RandomWithReplacement(count) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|_| rng.random_range(range.clone())).collect()
        }
    }
}
