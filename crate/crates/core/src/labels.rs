//! BIO tag set shared by the generator, the classifier and span scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Question,
    Answer,
    Header,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Question, EntityKind::Answer, EntityKind::Header];

    pub fn code(self) -> &'static str {
        match self {
            EntityKind::Question => "Q",
            EntityKind::Answer => "A",
            EntityKind::Header => "H",
        }
    }
}

/// A BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Outside,
    Begin(EntityKind),
    Inside(EntityKind),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown tag `{0}`")]
pub struct UnknownTag(pub String);

impl Tag {
    /// Class order used for one-hot targets and classifier outputs.
    pub const ALL: [Tag; 7] = [
        Tag::Outside,
        Tag::Begin(EntityKind::Question),
        Tag::Inside(EntityKind::Question),
        Tag::Begin(EntityKind::Answer),
        Tag::Inside(EntityKind::Answer),
        Tag::Begin(EntityKind::Header),
        Tag::Inside(EntityKind::Header),
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).expect("tag in ALL")
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }

    pub fn kind(self) -> Option<EntityKind> {
        match self {
            Tag::Outside => None,
            Tag::Begin(k) | Tag::Inside(k) => Some(k),
        }
    }

    /// Whether `self` may directly follow `prev` under strict BIO.
    pub fn may_follow(self, prev: Option<Tag>) -> bool {
        match self {
            Tag::Inside(k) => matches!(prev, Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == k),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(k) => write!(f, "B-{}", k.code()),
            Tag::Inside(k) => write!(f, "I-{}", k.code()),
        }
    }
}

impl FromStr for Tag {
    type Err = UnknownTag;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| UnknownTag(s.to_string()))
    }
}

impl Serialize for Tag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// True when no `I-X` follows anything but `B-X` or `I-X`.
pub fn is_valid_bio(tags: &[Tag]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !t.may_follow(prev) {
            return false;
        }
        prev = Some(t);
    }
    true
}

/// Ordered classes plus one-hot encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub classes: Vec<Tag>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            classes: Tag::ALL.to_vec(),
        }
    }
}

impl LabelSpace {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn one_hot(&self, tag: Tag) -> Vec<f64> {
        self.classes.iter().map(|c| f64::from(u8::from(*c == tag))).collect()
    }
}
