use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer seconds since the epoch (or since session start for simulated clocks).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeStamp(pub i64);

impl TimeStamp {
    pub fn seconds(self) -> i64 {
        self.0
    }
}

impl std::fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Closed interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: TimeStamp,
    pub end: TimeStamp,
}

impl TimeWindow {
    pub fn new(start: TimeStamp, end: TimeStamp) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidParams(format!(
                "time window start {start} after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: TimeStamp) -> bool {
        t >= self.start && t <= self.end
    }
}
