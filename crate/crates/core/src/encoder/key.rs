//! Embedding keys: `<episode>/<frame>/<tag>` with the tag grammar
//!
//! ```text
//! tag    := "full"
//!         | "grid2:" cell          cell in 0..4, row-major
//!         | "grid4:" cell          cell in 0..16, row-major
//!         | "masked:" source       source in {diff, flow}
//!         | "aug:" ops ":" seed    ops: crop|jitter|blur joined by '+',
//!                                  in that order, no repeats; seed: u64
//!         | "repr:" composition    a composed (and possibly head-projected)
//!                                  representation, see `composer`
//! ```
//!
//! Episode and frame are the decimal ids from the dataset layout.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::Augmentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskSource {
    Diff,
    Flow,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::Diff => "diff",
            MaskSource::Flow => "flow",
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum VariantTag {
    Full,
    Grid { n: usize, cell: usize },
    Masked(MaskSource),
    Aug { ops: Vec<Augmentation>, seed: u64 },
    Repr(String),
}

impl VariantTag {
    pub fn aug(ops: &[Augmentation], seed: u64) -> Result<Self> {
        let mut sorted = ops.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != ops.len() {
            return Err(Error::invalid(format!(
                "augmentation list {ops:?} must be non-empty without repeats"
            )));
        }
        Ok(VariantTag::Aug { ops: sorted, seed })
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantTag::Full => f.write_str("full"),
            VariantTag::Grid { n, cell } => write!(f, "grid{n}:{cell}"),
            VariantTag::Masked(src) => write!(f, "masked:{src}"),
            VariantTag::Aug { ops, seed } => {
                let names: Vec<&str> = ops.iter().map(|a| a.name()).collect();
                write!(f, "aug:{}:{seed}", names.join("+"))
            }
            VariantTag::Repr(config) => write!(f, "repr:{config}"),
        }
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid variant tag `{s}`"));
        if s == "full" {
            return Ok(VariantTag::Full);
        }
        let (head, rest) = s.split_once(':').ok_or_else(bad)?;
        match head {
            "grid2" | "grid4" => {
                let n = if head == "grid2" { 2 } else { 4 };
                let cell: usize = parse_decimal(rest).ok_or_else(bad)?;
                if cell >= n * n {
                    return Err(bad());
                }
                Ok(VariantTag::Grid { n, cell })
            }
            "masked" => match rest {
                "diff" => Ok(VariantTag::Masked(MaskSource::Diff)),
                "flow" => Ok(VariantTag::Masked(MaskSource::Flow)),
                _ => Err(bad()),
            },
            "aug" => {
                let (ops, seed) = rest.split_once(':').ok_or_else(bad)?;
                let seed = parse_decimal(seed).ok_or_else(bad)?;
                let ops: Vec<Augmentation> = ops
                    .split('+')
                    .map(|o| o.parse::<Augmentation>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if ops.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(bad());
                }
                VariantTag::aug(&ops, seed).map_err(|_| bad())
            }
            "repr" if !rest.is_empty() && !rest.contains('/') => {
                Ok(VariantTag::Repr(rest.to_string()))
            }
            _ => Err(bad()),
        }
    }
}

/// Plain decimal without sign or leading zeros, so every value has exactly
/// one spelling.
fn parse_decimal<T: FromStr>(s: &str) -> Option<T> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingKey {
    pub episode: usize,
    pub frame: usize,
    pub tag: VariantTag,
}

impl EmbeddingKey {
    pub fn new(episode: usize, frame: usize, tag: VariantTag) -> Self {
        Self {
            episode,
            frame,
            tag,
        }
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.episode, self.frame, self.tag)
    }
}

impl FromStr for EmbeddingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid embedding key `{s}`"));
        let mut parts = s.splitn(3, '/');
        let episode = parts.next().and_then(parse_decimal).ok_or_else(bad)?;
        let frame = parts.next().and_then(parse_decimal).ok_or_else(bad)?;
        let tag = parts.next().ok_or_else(bad)?.parse()?;
        Ok(Self {
            episode,
            frame,
            tag,
        })
    }
}

/// Whether `s` is a well-formed key.
pub fn is_valid_key(s: &str) -> bool {
    s.parse::<EmbeddingKey>()
        .map(|k| k.to_string() == s)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_examples_parse() {
        for s in [
            "0/0/full",
            "3/12/grid2:1",
            "3/12/grid4:13",
            "1/2/masked:diff",
            "1/2/masked:flow",
            "7/9/aug:blur:5",
            "7/9/aug:crop+jitter+blur:0",
            "2/4/repr:FI+2x2",
        ] {
            assert!(is_valid_key(s), "{s}");
        }
    }

    #[test]
    fn malformed_keys_rejected() {
        for s in [
            "",
            "0/0",
            "a/0/full",
            "0/0/grid3:1",
            "0/0/grid2:4",
            "0/0/grid4:16",
            "0/0/masked:edge",
            "0/0/aug:blur+crop:1",
            "0/0/aug:blur+blur:1",
            "0/0/aug::1",
            "0/0/aug:blur:-1",
            "00/0/full",
            "0/0/full ",
        ] {
            assert!(!is_valid_key(s), "{s}");
        }
    }

    fn tag_strategy() -> impl Strategy<Value = VariantTag> {
        prop_oneof![
            Just(VariantTag::Full),
            (0usize..4).prop_map(|cell| VariantTag::Grid { n: 2, cell }),
            (0usize..16).prop_map(|cell| VariantTag::Grid { n: 4, cell }),
            Just(VariantTag::Masked(MaskSource::Diff)),
            Just(VariantTag::Masked(MaskSource::Flow)),
            (proptest::sample::subsequence(
                vec![Augmentation::Crop, Augmentation::Jitter, Augmentation::Blur],
                1..=3
            ), any::<u64>())
                .prop_map(|(ops, seed)| VariantTag::aug(&ops, seed).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn display_parse_round_trip(ep in 0usize..10_000, fr in 0usize..100_000, tag in tag_strategy()) {
            let key = EmbeddingKey::new(ep, fr, tag);
            let s = key.to_string();
            prop_assert!(is_valid_key(&s));
            prop_assert_eq!(s.parse::<EmbeddingKey>().unwrap(), key);
        }
    }
}
