//! The six race/ethnicity categories and fixed-length per-race vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of race/ethnicity categories.
pub const N_RACES: usize = 6;

/// Per-race vector in canonical category order.
pub type RaceVec = [f64; N_RACES];

/// Canonical race/ethnicity category. The discriminant is the column index
/// used by every table, vector, and report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    Aian = 0,
    Api = 1,
    Black = 2,
    Hispanic = 3,
    White = 4,
    Other = 5,
}

impl Race {
    pub const ALL: [Race; N_RACES] = [
        Race::Aian,
        Race::Api,
        Race::Black,
        Race::Hispanic,
        Race::White,
        Race::Other,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Race> {
        Race::ALL.get(index).copied()
    }

    /// Display label, e.g. `AIAN`.
    pub fn label(self) -> &'static str {
        match self {
            Race::Aian => "AIAN",
            Race::Api => "API",
            Race::Black => "Black",
            Race::Hispanic => "Hispanic",
            Race::White => "White",
            Race::Other => "Other",
        }
    }

    /// Lowercase key used in CSV headers and JSON objects, e.g. `aian`.
    pub fn key(self) -> &'static str {
        match self {
            Race::Aian => "aian",
            Race::Api => "api",
            Race::Black => "black",
            Race::Hispanic => "hispanic",
            Race::White => "white",
            Race::Other => "other",
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown race category `{0}`")]
pub struct UnknownRace(pub String);

impl FromStr for Race {
    type Err = UnknownRace;

    /// Accepts the canonical label or key, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Race::ALL
            .into_iter()
            .find(|r| r.key().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownRace(s.to_string()))
    }
}

pub(crate) fn sum(v: &RaceVec) -> f64 {
    v.iter().sum()
}
