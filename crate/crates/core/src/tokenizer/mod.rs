//! Subword vocabularies with `##` continuation pieces: greedy encoding,
//! decoding, hybrid extension with frequent domain words, and comparison.

mod induce;

pub use induce::{induce_vocabulary, InducedModel, InductionMode};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ranked_words;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const CONTINUATION: &str = "##";
/// Words longer than this (in characters) encode to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    General,
    Legal,
    Hybrid,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::General => "general",
            Provenance::Legal => "legal",
            Provenance::Hybrid => "hybrid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    max_token_chars: usize,
    pub provenance: Provenance,
}

impl Vocabulary {
    /// Full token list, specials first at their fixed ids.
    pub fn from_tokens(tokens: Vec<String>, provenance: Provenance) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::InvalidVocabulary(format!(
                "{} tokens, need at least the {NUM_SPECIALS} specials",
                tokens.len()
            )));
        }
        for (id, sp) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[id] != *sp {
                return Err(Error::InvalidVocabulary(format!(
                    "id {id} must be {sp}, found {:?}",
                    tokens[id]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        let mut max_token_chars = 0;
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t == CONTINUATION {
                return Err(Error::InvalidVocabulary(format!("malformed token {t:?} at id {id}")));
            }
            if id >= NUM_SPECIALS && SPECIAL_TOKENS.contains(&t.as_str()) {
                return Err(Error::InvalidVocabulary(format!("special {t} repeated at id {id}")));
            }
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
            max_token_chars = max_token_chars.max(t.chars().count());
        }
        Ok(Self {
            tokens,
            token_to_id,
            max_token_chars,
            provenance,
        })
    }

    /// Specials followed by `pieces` in order.
    pub fn with_specials<I, S>(pieces: I, provenance: Provenance) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(pieces.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens, provenance)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    fn lookup_piece(&self, piece: &str) -> Option<usize> {
        self.id(piece).filter(|&id| !Self::is_special(id))
    }

    /// Greedy longest-match-first segmentation of one whitespace-free word.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut ids = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let prefix_len = if start > 0 { CONTINUATION.len() } else { 0 };
            let longest = (chars.len() - start).min(self.max_token_chars);
            let mut found = None;
            for end in (start + 1..=start + longest).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                debug_assert!(candidate.len() > prefix_len);
                if let Some(id) = self.lookup_piece(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    ids.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        ids
    }

    /// Encodes whitespace-separated words; never fails, unknown words become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Joins tokens with spaces, fusing `##` pieces onto their predecessor
    /// and dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if Self::is_special(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok.strip_prefix(CONTINUATION).unwrap_or(tok));
                }
            }
        }
        Ok(out)
    }

    /// One token per line, id = line number.
    pub fn to_file_string(&self) -> String {
        let mut s = String::with_capacity(self.tokens.iter().map(|t| t.len() + 1).sum());
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, provenance: Provenance) -> Result<Self> {
        let tokens = text
            .strip_suffix('\n')
            .unwrap_or(text)
            .split('\n')
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|_| Error::NotUtf8 {
            path: path.to_path_buf(),
        })?;
        Self::parse(&text, provenance)
    }

    fn non_special(&self) -> impl Iterator<Item = &str> {
        self.tokens[NUM_SPECIALS..].iter().map(String::as_str)
    }
}

/// Appends the `k` most frequent words that `base` cannot encode as a single
/// known token. Base ids are unchanged; new words take ids `V..V+k`.
pub fn merge_hybrid(base: &Vocabulary, corpus_freq: &BTreeMap<String, u64>, k: usize) -> Vocabulary {
    let mut added = Vec::with_capacity(k);
    for (word, _) in ranked_words(corpus_freq) {
        if added.len() == k {
            break;
        }
        if word.is_empty()
            || word.chars().any(char::is_whitespace)
            || word.chars().count() > MAX_WORD_CHARS
            || word == CONTINUATION
            || SPECIAL_TOKENS.contains(&word)
        {
            continue;
        }
        let enc = base.encode_word(word);
        if enc.len() == 1 && enc[0] != UNK {
            continue;
        }
        added.push(word.to_string());
    }
    if added.len() < k {
        log::warn!("only {} of {k} requested hybrid words are eligible", added.len());
    }
    let mut tokens = base.tokens.clone();
    tokens.extend(added);
    Vocabulary::from_tokens(tokens, Provenance::Hybrid).expect("eligible words are new, well-formed tokens")
}

/// Shared non-special tokens divided by the smaller non-special count.
pub fn vocab_overlap(v1: &Vocabulary, v2: &Vocabulary) -> f64 {
    let a: HashSet<&str> = v1.non_special().collect();
    let b: HashSet<&str> = v2.non_special().collect();
    let denom = a.len().min(b.len());
    if denom == 0 {
        return if a.is_empty() && b.is_empty() { 1.0 } else { 0.0 };
    }
    a.intersection(&b).count() as f64 / denom as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(pieces: &[&str]) -> Vocabulary {
        Vocabulary::with_specials(pieces.iter().copied(), Provenance::General).unwrap()
    }

    #[test]
    fn encode_examples() {
        let v = vocab(&["a", "b", "##b"]);
        assert_eq!(v.encode("ab"), vec![v.id("a").unwrap(), v.id("##b").unwrap()]);
        assert_eq!(v.encode("a b"), vec![v.id("a").unwrap(), v.id("b").unwrap()]);
        assert_eq!(v.encode("z"), vec![UNK]);
        assert_eq!(v.encode("az"), vec![UNK]);
        assert!(v.encode("  ").is_empty());
    }

    #[test]
    fn encode_prefers_longest_piece() {
        let v = vocab(&["con", "c", "##t", "##ting", "##ency", "##o", "##n"]);
        let ids = v.encode("contingency");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["con", "##ting", "##ency"]);
    }

    #[test]
    fn literal_specials_in_text_are_not_matched() {
        let v = vocab(&["[", "##M", "##A", "##S", "##K", "##]"]);
        assert_eq!(v.encode("[MASK]").len(), 6);
    }

    #[test]
    fn overlong_words_are_unknown() {
        let v = vocab(&["a", "##a"]);
        assert_eq!(v.encode(&"a".repeat(MAX_WORD_CHARS)).len(), MAX_WORD_CHARS);
        assert_eq!(v.encode(&"a".repeat(MAX_WORD_CHARS + 1)), vec![UNK]);
    }

    #[test]
    fn decode_examples() {
        let v = vocab(&["a", "b", "##b"]);
        let (a, hb) = (v.id("a").unwrap(), v.id("##b").unwrap());
        assert_eq!(v.decode(&[a, hb]).unwrap(), "ab");
        assert_eq!(v.decode(&[CLS, a, SEP]).unwrap(), "a");
        assert!(matches!(v.decode(&[99]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn validation_rejects_bad_lists() {
        assert!(Vocabulary::from_tokens(vec!["[PAD]".into()], Provenance::General).is_err());
        assert!(Vocabulary::with_specials(["a", "a"], Provenance::General).is_err());
        assert!(Vocabulary::with_specials(["[CLS]"], Provenance::General).is_err());
        assert!(Vocabulary::with_specials(["a b"], Provenance::General).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.swap(0, 1);
        assert!(Vocabulary::from_tokens(toks, Provenance::General).is_err());
    }

    #[test]
    fn merge_examples() {
        let base = vocab(&["l", "##e", "##s", "##o", "##r", "lease", "a"]);
        let freq = BTreeMap::from([
            ("lessor".to_string(), 50),
            ("lease".to_string(), 40),
            ("a".to_string(), 100),
            ("les".to_string(), 10),
        ]);
        assert_eq!(merge_hybrid(&base, &freq, 0).tokens(), base.tokens());
        let merged = merge_hybrid(&base, &freq, 1);
        assert_eq!(merged.len(), base.len() + 1);
        assert_eq!(&merged.tokens()[..base.len()], base.tokens());
        assert_eq!(merged.encode("lessor"), vec![base.len()]);
        assert_eq!(merged.provenance, Provenance::Hybrid);
        let all = merge_hybrid(&base, &freq, 10);
        assert_eq!(all.len(), base.len() + 2);
    }

    #[test]
    fn overlap_examples() {
        let v1 = vocab(&["a", "b", "c", "d"]);
        let v2 = vocab(&["c", "d", "e", "f"]);
        let v3 = vocab(&["x", "y"]);
        assert_eq!(vocab_overlap(&v1, &v1), 1.0);
        assert_eq!(vocab_overlap(&v1, &v3), 0.0);
        assert_eq!(vocab_overlap(&v1, &v2), 0.5);
    }

    #[test]
    fn save_load_round_trip() {
        let v = vocab(&["a", "##b", "Lessor", "attorney-in-fact"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), v.len());
        assert_eq!(Vocabulary::load(&p, Provenance::General).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_with_full_alphabet(words in prop::collection::vec("[a-e]{1,8}", 1..12)) {
            let mut pieces = vec!["ab".to_string(), "##cd".to_string(), "eee".to_string()];
            for c in 'a'..='e' {
                pieces.push(c.to_string());
                pieces.push(format!("##{c}"));
            }
            let v = Vocabulary::with_specials(pieces, Provenance::General).unwrap();
            let text = words.join("  \t ");
            let ids = v.encode(&text);
            prop_assert!(!ids.is_empty());
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(v.decode(&ids).unwrap(), words.join(" "));
        }
    }
}
