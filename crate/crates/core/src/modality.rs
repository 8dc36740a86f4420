use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Auxiliary sensor paired with the RGB frame.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Thermal,
    Event,
    Absent,
}

impl Modality {
    pub const AUXILIARY: [Modality; 3] = [Modality::Depth, Modality::Thermal, Modality::Event];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Thermal => "thermal",
            Modality::Event => "event",
            Modality::Absent => "absent",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "depth" | "d" => Ok(Modality::Depth),
            "thermal" | "t" => Ok(Modality::Thermal),
            "event" | "e" => Ok(Modality::Event),
            "absent" | "none" | "rgb" => Ok(Modality::Absent),
            other => Err(Error::Domain(format!("unknown modality tag '{other}'"))),
        }
    }
}
