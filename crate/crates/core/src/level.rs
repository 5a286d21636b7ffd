use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Per-session protection mode.
///
/// Ordering follows preference: `L1 > L2 > L3 > L4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SecurityLevel {
    /// Direct QKD key between adjacent QNs.
    L1,
    /// Multi-hop QKD key via trusted relays.
    L2,
    /// CN-to-QN: relayed QKD key hybridised with a PQC KEM secret.
    L3,
    /// Pure PQC between endpoints without usable quantum adjacency.
    L4,
}

impl SecurityLevel {
    /// All levels, most preferred first.
    pub const BY_PREFERENCE: [SecurityLevel; 4] = [Self::L1, Self::L2, Self::L3, Self::L4];

    pub fn number(self) -> u8 {
        match self {
            Self::L1 => 1,
            Self::L2 => 2,
            Self::L3 => 3,
            Self::L4 => 4,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Self::L1),
            2 => Some(Self::L2),
            3 => Some(Self::L3),
            4 => Some(Self::L4),
            _ => None,
        }
    }
}

impl Ord for SecurityLevel {
    fn cmp(&self, other: &Self) -> Ordering {
        other.number().cmp(&self.number())
    }
}

impl PartialOrd for SecurityLevel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SecurityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.number())
    }
}
