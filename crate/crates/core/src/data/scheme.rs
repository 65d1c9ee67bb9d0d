//! BIO / BIOES tag grammar and conversions.

use std::fmt;

use crate::error::{Error, Result};

/// Position role of a chunk tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Begin,
    Inside,
    End,
    Single,
}

impl Role {
    fn prefix(self) -> char {
        match self {
            Role::Begin => 'B',
            Role::Inside => 'I',
            Role::End => 'E',
            Role::Single => 'S',
        }
    }
}

/// A parsed chunk tag: `O`, or a role with an entity type (`B-PER`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Chunk { role: Role, kind: String },
}

impl Tag {
    pub fn parse(s: &str) -> Result<Tag> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let bad = || Error::Scheme {
            tag: s.to_string(),
            line: None,
        };
        let (prefix, kind) = s.split_once('-').ok_or_else(bad)?;
        let role = match prefix {
            "B" => Role::Begin,
            "I" => Role::Inside,
            "E" => Role::End,
            "S" => Role::Single,
            _ => return Err(bad()),
        };
        if kind.is_empty() {
            return Err(bad());
        }
        Ok(Tag::Chunk {
            role,
            kind: kind.to_string(),
        })
    }

    pub fn chunk(role: Role, kind: &str) -> Tag {
        Tag::Chunk {
            role,
            kind: kind.to_string(),
        }
    }

    pub fn role(&self) -> Option<Role> {
        match self {
            Tag::Outside => None,
            Tag::Chunk { role, .. } => Some(*role),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Chunk { kind, .. } => Some(kind),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Chunk { role, kind } => write!(f, "{}-{kind}", role.prefix()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Bio,
    Bioes,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(Scheme::Bio),
            "bioes" => Ok(Scheme::Bioes),
            other => Err(Error::Config(format!("unknown tag scheme {other:?}"))),
        }
    }
}

fn parse_all<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Tag>> {
    labels.iter().map(|l| Tag::parse(l.as_ref())).collect()
}

/// BIO to BIOES. A stray `I-X` (not continuing an `X` chunk) is read as the
/// start of a new chunk.
pub fn bio_to_bioes<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    let tags = parse_all(labels)?;
    if let Some(t) = tags
        .iter()
        .find(|t| matches!(t.role(), Some(Role::End | Role::Single)))
    {
        return Err(Error::Scheme {
            tag: t.to_string(),
            line: None,
        });
    }

    // Repair pass: every chunk now starts with B.
    let mut repaired = tags.clone();
    for i in 0..repaired.len() {
        if let Tag::Chunk {
            role: Role::Inside,
            kind,
        } = &tags[i]
        {
            let continues = i > 0 && tags[i - 1].kind() == Some(kind.as_str());
            if !continues {
                repaired[i] = Tag::chunk(Role::Begin, kind);
            }
        }
    }

    let out = repaired
        .iter()
        .enumerate()
        .map(|(i, tag)| {
            let next_continues = match (tag, repaired.get(i + 1)) {
                (
                    Tag::Chunk { kind, .. },
                    Some(Tag::Chunk {
                        role: Role::Inside,
                        kind: k2,
                    }),
                ) => kind == k2,
                _ => false,
            };
            match tag {
                Tag::Outside => "O".to_string(),
                Tag::Chunk { role, kind } => {
                    let role = match (role, next_continues) {
                        (Role::Begin, true) => Role::Begin,
                        (Role::Begin, false) => Role::Single,
                        (_, true) => Role::Inside,
                        (_, false) => Role::End,
                    };
                    Tag::chunk(role, kind).to_string()
                }
            }
        })
        .collect();
    Ok(out)
}

/// BIOES to BIO: `S-X` becomes `B-X`, `E-X` becomes `I-X`.
pub fn bioes_to_bio<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    parse_all(labels).map(|tags| {
        tags.into_iter()
            .map(|t| match t {
                Tag::Outside => "O".to_string(),
                Tag::Chunk { role, kind } => {
                    let role = match role {
                        Role::Single => Role::Begin,
                        Role::End => Role::Inside,
                        r => r,
                    };
                    Tag::chunk(role, &kind).to_string()
                }
            })
            .collect()
    })
}

/// Whether `to` may follow `from` in a well-formed BIOES sequence.
/// `None` stands for the sentence boundary.
pub fn bioes_allows(from: Option<&Tag>, to: Option<&Tag>) -> bool {
    let open = |t: Option<&Tag>| matches!(t.and_then(Tag::role), Some(Role::Begin | Role::Inside));
    match (from, to) {
        (None, None) => true,
        (f, None) => !open(f),
        (f, Some(t)) => match t {
            Tag::Outside => !open(f),
            Tag::Chunk { role, kind } => match role {
                Role::Begin | Role::Single => !open(f),
                Role::Inside | Role::End => open(f) && f.and_then(Tag::kind) == Some(kind.as_str()),
            },
        },
    }
}

/// Index of the first BIOES violation in `labels` (`labels.len()` when the
/// sentence ends inside an open chunk), or `None` if the sequence is valid.
pub fn first_bioes_violation<S: AsRef<str>>(labels: &[S]) -> Result<Option<usize>> {
    let tags = parse_all(labels)?;
    let mut prev: Option<&Tag> = None;
    for (i, t) in tags.iter().enumerate() {
        if !bioes_allows(prev, Some(t)) {
            return Ok(Some(i));
        }
        prev = Some(t);
    }
    if !bioes_allows(prev, None) {
        return Ok(Some(tags.len()));
    }
    Ok(None)
}

pub fn is_valid_bioes<S: AsRef<str>>(labels: &[S]) -> Result<bool> {
    first_bioes_violation(labels).map(|v| v.is_none())
}
