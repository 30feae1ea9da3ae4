use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum rendered length of a key, separators included.
pub const MAX_KEY_LEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("key has no segments")]
    Empty,
    #[error("key contains an empty segment")]
    EmptySegment,
    #[error("invalid key segment {0:?}: allowed characters are [a-zA-Z0-9_.-]")]
    InvalidSegment(String),
    #[error("key is {0} bytes long, limit is {MAX_KEY_LEN}")]
    TooLong(usize),
}

/// True when `segment` is a non-empty run of `[a-zA-Z0-9_.-]`.
pub fn is_valid_segment(segment: &str) -> bool {
    !segment.is_empty()
        && segment
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

pub fn validate_segment(segment: &str) -> Result<(), KeyError> {
    if segment.is_empty() {
        Err(KeyError::EmptySegment)
    } else if !is_valid_segment(segment) {
        Err(KeyError::InvalidSegment(segment.to_string()))
    } else {
        Ok(())
    }
}

/// Hierarchical key, rendered as `a/b/c`.
///
/// Ordering is segment-wise, so every key under a given prefix sorts into
/// one contiguous range.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StateKey {
    segments: Vec<String>,
}

impl StateKey {
    pub fn parse(path: &str) -> Result<Self, KeyError> {
        if path.is_empty() {
            return Err(KeyError::Empty);
        }
        Self::from_segments(path.split('/'))
    }

    pub fn from_segments<I, S>(segments: I) -> Result<Self, KeyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        if segments.is_empty() {
            return Err(KeyError::Empty);
        }
        for s in &segments {
            validate_segment(s)?;
        }
        let len = segments.iter().map(String::len).sum::<usize>() + segments.len() - 1;
        if len > MAX_KEY_LEN {
            return Err(KeyError::TooLong(len));
        }
        Ok(Self { segments })
    }

    pub fn child(&self, segment: &str) -> Result<Self, KeyError> {
        Self::from_segments(self.segments.iter().cloned().chain([segment.to_string()]))
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn last(&self) -> &str {
        self.segments.last().map(String::as_str).unwrap_or_default()
    }

    /// Segment-wise prefix test: `dep/d1` covers `dep/d1/x` but not
    /// `dep/d10`.
    pub fn is_prefix_of(&self, other: &StateKey) -> bool {
        other.segments.len() >= self.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| a == b)
    }

    pub fn render(&self) -> String {
        self.segments.join("/")
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl fmt::Debug for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateKey({})", self.render())
    }
}

impl FromStr for StateKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for StateKey {
    type Error = KeyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl TryFrom<&str> for StateKey {
    type Error = KeyError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::parse(value)
    }
}

impl From<StateKey> for String {
    fn from(key: StateKey) -> Self {
        key.render()
    }
}
