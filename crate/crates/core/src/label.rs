use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of expression classes.
pub const NUM_CLASSES: usize = 7;

/// The seven expression categories. The discriminant is the canonical class
/// index used by every model output, manifest and file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpressionLabel {
    Angry = 0,
    Disgust = 1,
    Fear = 2,
    Happy = 3,
    Neutral = 4,
    Sad = 5,
    Surprise = 6,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; NUM_CLASSES] = [
        ExpressionLabel::Angry,
        ExpressionLabel::Disgust,
        ExpressionLabel::Fear,
        ExpressionLabel::Happy,
        ExpressionLabel::Neutral,
        ExpressionLabel::Sad,
        ExpressionLabel::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Angry => "Angry",
            ExpressionLabel::Disgust => "Disgust",
            ExpressionLabel::Fear => "Fear",
            ExpressionLabel::Happy => "Happy",
            ExpressionLabel::Neutral => "Neutral",
            ExpressionLabel::Sad => "Sad",
            ExpressionLabel::Surprise => "Surprise",
        }
    }

    /// Three-letter column header used in rendered tables.
    pub fn short(self) -> &'static str {
        &self.name()[..3]
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpressionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown expression label {s:?}")))
    }
}
