//! Topic names, topic filters and level-wise matching.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const LEVEL_SEPARATOR: char = '/';
pub const SINGLE_LEVEL_WILDCARD: &str = "+";
pub const MULTI_LEVEL_WILDCARD: &str = "#";

/// Longest UTF-8 string representable on the wire (u16 length prefix).
pub const MAX_STRING_LEN: usize = 65_535;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic must not be empty")]
    Empty,
    #[error("topic exceeds {MAX_STRING_LEN} bytes")]
    TooLong,
    #[error("topic contains a NUL character")]
    ContainsNul,
    #[error("publish topic contains a wildcard")]
    Wildcard,
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Level {
    Literal(String),
    /// `+`
    Single,
    /// `#`, only ever the final level.
    Multi,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Literal(s) => f.write_str(s),
            Level::Single => f.write_str(SINGLE_LEVEL_WILDCARD),
            Level::Multi => f.write_str(MULTI_LEVEL_WILDCARD),
        }
    }
}

/// A parsed subscription filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    levels: Vec<Level>,
}

impl TopicFilter {
    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn has_wildcards(&self) -> bool {
        self.levels.iter().any(|l| !matches!(l, Level::Literal(_)))
    }

    /// Level-wise match of a publish topic against this filter.
    ///
    /// Topics whose first level starts with `$` are never matched by a
    /// leading wildcard.
    pub fn matches(&self, topic: &str) -> bool {
        if topic.starts_with('$') && !matches!(self.levels.first(), Some(Level::Literal(_))) {
            return false;
        }
        let mut topic_levels = topic.split(LEVEL_SEPARATOR);
        for level in &self.levels {
            match level {
                Level::Multi => return true,
                Level::Single => {
                    if topic_levels.next().is_none() {
                        return false;
                    }
                }
                Level::Literal(lit) => match topic_levels.next() {
                    Some(t) if t == lit => {}
                    _ => return false,
                },
            }
        }
        topic_levels.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{level}")?;
        }
        Ok(())
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_filter(s)
    }
}

/// Parses a subscription filter.
///
/// Rejects the empty string, embedded NUL, a `#` anywhere but the last
/// level, and levels mixing wildcards with literal characters (`a+`).
pub fn validate_filter(s: &str) -> Result<TopicFilter, TopicError> {
    let invalid = || TopicError::InvalidFilter(s.to_owned());
    if s.is_empty() || s.len() > MAX_STRING_LEN || s.contains('\0') {
        return Err(invalid());
    }
    let raw: Vec<&str> = s.split(LEVEL_SEPARATOR).collect();
    let last = raw.len() - 1;
    let mut levels = Vec::with_capacity(raw.len());
    for (i, level) in raw.into_iter().enumerate() {
        let parsed = match level {
            MULTI_LEVEL_WILDCARD if i == last => Level::Multi,
            SINGLE_LEVEL_WILDCARD => Level::Single,
            l if l.contains(['+', '#']) => return Err(invalid()),
            l => Level::Literal(l.to_owned()),
        };
        levels.push(parsed);
    }
    Ok(TopicFilter { levels })
}

/// Checks a topic name is usable in a PUBLISH.
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() {
        return Err(TopicError::Empty);
    }
    if topic.len() > MAX_STRING_LEN {
        return Err(TopicError::TooLong);
    }
    if topic.contains('\0') {
        return Err(TopicError::ContainsNul);
    }
    if topic.contains(['+', '#']) {
        return Err(TopicError::Wildcard);
    }
    Ok(())
}

pub fn topic_matches(filter: &TopicFilter, topic: &str) -> bool {
    filter.matches(topic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> TopicFilter {
        validate_filter(s).unwrap()
    }

    #[test]
    fn exact_and_wildcard_matches() {
        assert!(f("plant/energy/esp32").matches("plant/energy/esp32"));
        assert!(f("plant/+/esp32").matches("plant/energy/esp32"));
        assert!(f("plant/#").matches("plant/env/room1"));
        assert!(!f("plant/+").matches("plant/a/b"));
        assert!(f("plant/#").matches("plant"));
        assert!(f("#").matches("a/b/c"));
        assert!(!f("#").matches("$SYS/uptime"));
        assert!(f("$SYS/#").matches("$SYS/uptime"));
        assert!(f("a/+/b").matches("a//b"));
    }

    #[test]
    fn filter_parsing() {
        assert_eq!(f("plant/#").levels(), &[Level::Literal("plant".into()), Level::Multi]);
        assert_eq!(f("+/+").levels(), &[Level::Single, Level::Single]);
        for bad in ["#/a", "a+", "a/b#", "", "a\0b", "bad/#/x", "++"] {
            assert!(validate_filter(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn filter_display_round_trips() {
        for s in ["plant/#", "+/+", "a//b", "/", "#", "a/+/c"] {
            assert_eq!(f(s).to_string(), s);
        }
    }

    #[test]
    fn publish_topic_rules() {
        assert!(validate_topic("plant/energy/esp32").is_ok());
        assert_eq!(validate_topic("a/+"), Err(TopicError::Wildcard));
        assert_eq!(validate_topic(""), Err(TopicError::Empty));
        assert_eq!(validate_topic("a\0"), Err(TopicError::ContainsNul));
    }
}
