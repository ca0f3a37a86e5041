use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth or predicted class. Class index order is fixed as
/// `[bona-fide, attack]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[serde(rename = "bonafide")]
    BonaFide,
    Attack,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Attack => 1,
        }
    }

    /// 1.0 for attacks, 0.0 for bona-fide samples.
    pub fn target(self) -> f64 {
        self.index() as f64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bonafide" | "bona-fide" | "bona_fide" => Ok(Label::BonaFide),
            "attack" | "morph" => Ok(Label::Attack),
            other => Err(Error::format("label", format!("unknown label {other:?}"))),
        }
    }
}
