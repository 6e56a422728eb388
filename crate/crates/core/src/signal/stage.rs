use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// AASM sleep stages, in canonical class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    N1,
    N2,
    N3,
    R,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [Self::W, Self::N1, Self::N2, Self::N3, Self::R];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::W => "W",
            Self::N1 => "N1",
            Self::N2 => "N2",
            Self::N3 => "N3",
            Self::R => "R",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labeling convention of a hypnogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageScheme {
    /// Rechtschaffen & Kales; stages 3 and 4 merge into N3.
    #[serde(rename = "RK")]
    Rk,
    #[serde(rename = "AASM")]
    Aasm,
}

impl FromStr for StageScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RK" | "R&K" => Ok(Self::Rk),
            "AASM" => Ok(Self::Aasm),
            _ => Err(format!("unknown stage scheme `{s}` (expected RK or AASM)")),
        }
    }
}

/// Maps a raw hypnogram label to a stage. Labels may carry a
/// `Sleep stage ` prefix. Canonical names map to themselves under both
/// schemes, so the mapping is idempotent on its outputs.
pub fn map_stage(raw_label: &str, scheme: StageScheme) -> Option<SleepStage> {
    let t = raw_label.trim();
    let prefix = "sleep stage ";
    let token = if t.len() >= prefix.len() && t[..prefix.len()].eq_ignore_ascii_case(prefix) { &t[prefix.len()..] } else { t };
    let token = token.trim().to_ascii_uppercase();
    let canonical = match token.as_str() {
        "W" => Some(SleepStage::W),
        "N1" => Some(SleepStage::N1),
        "N2" => Some(SleepStage::N2),
        "N3" => Some(SleepStage::N3),
        "R" => Some(SleepStage::R),
        _ => None,
    };
    if canonical.is_some() {
        return canonical;
    }
    match scheme {
        StageScheme::Rk => match token.as_str() {
            "1" => Some(SleepStage::N1),
            "2" => Some(SleepStage::N2),
            "3" | "4" => Some(SleepStage::N3),
            "REM" => Some(SleepStage::R),
            _ => None,
        },
        StageScheme::Aasm => match token.as_str() {
            "REM" => Some(SleepStage::R),
            _ => None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk_mapping() {
        let rk = StageScheme::Rk;
        assert_eq!(map_stage("Sleep stage 4", rk), Some(SleepStage::N3));
        assert_eq!(map_stage("Sleep stage 3", rk), Some(SleepStage::N3));
        assert_eq!(map_stage("Sleep stage W", rk), Some(SleepStage::W));
        assert_eq!(map_stage("Sleep stage 1", rk), Some(SleepStage::N1));
        assert_eq!(map_stage("Sleep stage 2", rk), Some(SleepStage::N2));
        assert_eq!(map_stage("Sleep stage R", rk), Some(SleepStage::R));
        assert_eq!(map_stage("Movement time", rk), None);
        assert_eq!(map_stage("Sleep stage ?", rk), None);
    }

    #[test]
    fn aasm_mapping() {
        let a = StageScheme::Aasm;
        for s in SleepStage::ALL {
            assert_eq!(map_stage(&format!("Sleep stage {s}"), a), Some(s));
        }
        assert_eq!(map_stage("Sleep stage 4", a), None);
    }

    #[test]
    fn idempotent_on_outputs() {
        let labels = ["Sleep stage 4", "W", "2", "REM", "Movement time", "", "N3", "sleep stage r"];
        for scheme in [StageScheme::Rk, StageScheme::Aasm] {
            for l in labels {
                let once = map_stage(l, scheme);
                if let Some(s) = once {
                    assert_eq!(map_stage(s.name(), scheme), Some(s));
                }
            }
        }
    }
}
