use alloc::string::{String, ToString};
use core::fmt;
use core::str::FromStr;

/// Longest topic name accepted, in bytes.
pub const MAX_TOPIC_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopicError {
    #[error("topic name is empty")]
    Empty,
    #[error("topic name must start with '/'")]
    MissingLeadingSlash,
    #[error("topic name has an empty segment")]
    EmptySegment,
    #[error("topic name contains invalid character {0:?}")]
    InvalidChar(char),
    #[error("topic name is {0} bytes, limit is 255")]
    TooLong(usize),
}

/// A validated topic name such as `/camera/image_raw`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: &str) -> Result<Self, TopicError> {
        validate(name)?;
        Ok(TopicName(name.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn validate(name: &str) -> Result<(), TopicError> {
    if name.is_empty() {
        return Err(TopicError::Empty);
    }
    if name.len() > MAX_TOPIC_LEN {
        return Err(TopicError::TooLong(name.len()));
    }
    if !name.starts_with('/') {
        return Err(TopicError::MissingLeadingSlash);
    }
    if let Some(c) = name
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || *c == '_' || *c == '/'))
    {
        return Err(TopicError::InvalidChar(c));
    }
    // "/" alone has one empty segment; so does "/a//b" or "/a/".
    if name[1..].split('/').any(str::is_empty) {
        return Err(TopicError::EmptySegment);
    }
    Ok(())
}

impl FromStr for TopicName {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicName::new(s)
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for TopicName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    #[test]
    fn accepts_typical_names() {
        for ok in ["/t", "/camera/image_raw", "/fogros/latency", "/A_1/b2"] {
            assert!(TopicName::new(ok).is_ok(), "{ok}");
        }
    }

    #[test]
    fn rejects_malformed_names() {
        assert_eq!(TopicName::new(""), Err(TopicError::Empty));
        assert_eq!(TopicName::new("t"), Err(TopicError::MissingLeadingSlash));
        assert_eq!(TopicName::new("/"), Err(TopicError::EmptySegment));
        assert_eq!(TopicName::new("/a//b"), Err(TopicError::EmptySegment));
        assert_eq!(TopicName::new("/a/"), Err(TopicError::EmptySegment));
        assert_eq!(TopicName::new("/a-b"), Err(TopicError::InvalidChar('-')));
        assert_eq!(TopicName::new("/ä"), Err(TopicError::InvalidChar('ä')));
    }

    #[test]
    fn length_limit_is_255_bytes() {
        let mut s = String::from("/");
        s.extend(core::iter::repeat_n('a', 254));
        assert!(TopicName::new(&s).is_ok());
        s.push('a');
        assert_eq!(TopicName::new(&s), Err(TopicError::TooLong(256)));
    }
}
