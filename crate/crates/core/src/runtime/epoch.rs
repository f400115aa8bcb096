//! Epoch timeline. Epoch `i` covers ticks `[i * len, (i + 1) * len)`.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

pub const DEFAULT_EPOCH_LEN: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epoch {
    pub id: u64,
    pub start: u64,
    /// Exclusive.
    pub end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timeline {
    len: u64,
}

impl Timeline {
    pub fn new(len: u64) -> Self {
        Self { len: len.max(1) }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn epoch_of(&self, ts: u64) -> u64 {
        ts / self.len
    }

    pub fn epoch(&self, id: u64) -> Epoch {
        Epoch {
            id,
            start: id * self.len,
            end: (id + 1) * self.len,
        }
    }

    /// Epochs overlapping `[ts - window, ts]`; always ends at the epoch of `ts`.
    pub fn epochs_for(&self, ts: u64, window: u64) -> RangeInclusive<u64> {
        self.epoch_of(ts.saturating_sub(window))..=self.epoch_of(ts)
    }
}
