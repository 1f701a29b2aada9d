//! Desk-scale datasets and their on-disk format.

pub mod corpus;
pub mod io;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{gen_corpus, oracle_mel, token_duration, CorpusSpec, Normalization, SynthCorpus, Utterance};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, Dataset, SampleItem, SampleSet, FORMAT_VERSION};
pub use toy::{gen_toy, toy_centers, PointSet, ToyKind, ToySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split code {other}"))),
        }
    }
}

/// Train/val/test sizes in the 16:1:2 proportion, with at least one held-out
/// item in each of val and test once `n >= 3`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let val = ((n as f64 / 19.0).round() as usize).max(1);
    let test = ((2.0 * n as f64 / 19.0).round() as usize).max(1);
    (n - val - test, val, test)
}

/// Rounds every value to the nearest `f32`, so that in-memory data survives
/// a trip through the 32-bit on-disk payload unchanged.
pub(crate) fn f32_exact(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}
