use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Developer intent behind a comment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntentCategory {
    What,
    Why,
    HowToUse,
    HowItIsDone,
    Property,
    Others,
}

impl IntentCategory {
    pub const ALL: [IntentCategory; 6] = [
        IntentCategory::What,
        IntentCategory::Why,
        IntentCategory::HowToUse,
        IntentCategory::HowItIsDone,
        IntentCategory::Property,
        IntentCategory::Others,
    ];

    /// The five intents a comment can be generated for.
    pub const GENERATABLE: [IntentCategory; 5] = [
        IntentCategory::What,
        IntentCategory::Why,
        IntentCategory::HowToUse,
        IntentCategory::HowItIsDone,
        IntentCategory::Property,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IntentCategory::What => "what",
            IntentCategory::Why => "why",
            IntentCategory::HowToUse => "how-to-use",
            IntentCategory::HowItIsDone => "how-it-is-done",
            IntentCategory::Property => "property",
            IntentCategory::Others => "others",
        }
    }

    /// `Others` marks ambiguous comments that are dropped from training corpora.
    pub fn is_noise(self) -> bool {
        self == IntentCategory::Others
    }
}

impl fmt::Display for IntentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntentCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        IntentCategory::ALL
            .iter()
            .copied()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::InvalidIntent(s.to_string()))
    }
}

impl Serialize for IntentCategory {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for IntentCategory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
