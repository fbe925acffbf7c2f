//! Closed token vocabulary with special tokens and a noun lexicon marking
//! visually groundable words.

use std::collections::{HashMap, HashSet};
use std::fmt;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, PartialEq)]
pub enum VocabError {
    DuplicateToken(String),
    MissingSpecial(&'static str),
    SpecialsNotDistinct,
    UnknownToken(String),
    NounNotInVocab(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::DuplicateToken(t) => write!(f, "duplicate token {t:?}"),
            VocabError::MissingSpecial(s) => write!(f, "vocabulary is missing {s}"),
            VocabError::SpecialsNotDistinct => write!(f, "BOS/EOS/PAD must be distinct"),
            VocabError::UnknownToken(t) => write!(f, "token {t:?} not in vocabulary"),
            VocabError::NounNotInVocab(t) => write!(f, "noun {t:?} not in vocabulary"),
        }
    }
}

impl std::error::Error for VocabError {}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
    eos: usize,
    pad: usize,
    nouns: HashSet<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list containing the three
    /// special tokens, plus the noun lexicon subset.
    pub fn new(tokens: Vec<String>, nouns: &[String]) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::DuplicateToken(t.clone()));
            }
        }
        let lookup = |s: &'static str| index.get(s).copied().ok_or(VocabError::MissingSpecial(s));
        let bos = lookup(BOS)?;
        let eos = lookup(EOS)?;
        let pad = lookup(PAD)?;
        if bos == eos || bos == pad || eos == pad {
            return Err(VocabError::SpecialsNotDistinct);
        }
        let mut noun_ids = HashSet::new();
        for n in nouns {
            let id = index
                .get(n)
                .copied()
                .ok_or_else(|| VocabError::NounNotInVocab(n.clone()))?;
            noun_ids.insert(id);
        }
        Ok(Vocabulary {
            tokens,
            index,
            bos,
            eos,
            pad,
            nouns: noun_ids,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos_id(&self) -> usize {
        self.bos
    }

    pub fn eos_id(&self) -> usize {
        self.eos
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_noun(&self, id: usize) -> bool {
        self.nouns.contains(&id)
    }

    pub fn is_noun_token(&self, token: &str) -> bool {
        self.id(token).is_some_and(|id| self.is_noun(id))
    }

    /// Noun lexicon tokens in vocabulary order.
    pub fn noun_tokens(&self) -> Vec<String> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| self.nouns.contains(i))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, VocabError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| VocabError::UnknownToken(t.clone()))
            })
            .collect()
    }

    /// Encodes a caption and appends the EOS terminal, as consumed by the
    /// teacher-forced losses.
    pub fn encode_terminated(&self, tokens: &[String]) -> Result<Vec<usize>, VocabError> {
        let mut ids = self.encode(tokens)?;
        ids.push(self.eos);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn sample_vocab() -> Vocabulary {
        Vocabulary::new(
            toks(&[BOS, EOS, PAD, "a", "circle", "square"]),
            &toks(&["circle", "square"]),
        )
        .unwrap()
    }

    #[test]
    fn bijection_and_specials() {
        let v = sample_vocab();
        assert_eq!(v.size(), 6);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
            assert_eq!(v.token(i), Some(t.as_str()));
        }
        assert_ne!(v.bos_id(), v.eos_id());
        assert_ne!(v.bos_id(), v.pad_id());
        assert_ne!(v.eos_id(), v.pad_id());
    }

    #[test]
    fn noun_lexicon_is_subset() {
        let v = sample_vocab();
        assert!(v.is_noun_token("circle"));
        assert!(!v.is_noun_token("a"));
        assert_eq!(v.noun_tokens(), toks(&["circle", "square"]));
        assert!(Vocabulary::new(toks(&[BOS, EOS, PAD]), &toks(&["ghost"])).is_err());
    }

    #[test]
    fn encode_rejects_oov() {
        let v = sample_vocab();
        assert!(matches!(
            v.encode(&toks(&["a", "ghost"])),
            Err(VocabError::UnknownToken(_))
        ));
        let ids = v.encode_terminated(&toks(&["a", "circle"])).unwrap();
        assert_eq!(ids.last(), Some(&v.eos_id()));
    }

    #[test]
    fn duplicates_and_missing_specials_rejected() {
        assert!(matches!(
            Vocabulary::new(toks(&[BOS, EOS, PAD, "a", "a"]), &[]),
            Err(VocabError::DuplicateToken(_))
        ));
        assert!(matches!(
            Vocabulary::new(toks(&[BOS, EOS]), &[]),
            Err(VocabError::MissingSpecial(_))
        ));
    }
}
