//! Token inventory shared by every language.
//!
//! Global ids: the initial special tokens come first (`<|sot|>`, `<|eot|>`,
//! `<|pad|>`, then one LID token per pretrained language), followed by the
//! vocabulary tokens. LID tokens for languages registered later are appended
//! after the vocabulary so that no existing id ever moves.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

pub const SOT: TokenId = 0;
pub const EOT: TokenId = 1;
pub const PAD: TokenId = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Sot,
    Eot,
    Pad,
    Lid(String),
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Special::Sot => write!(f, "<|sot|>"),
            Special::Eot => write!(f, "<|eot|>"),
            Special::Pad => write!(f, "<|pad|>"),
            Special::Lid(l) => write!(f, "<|lid:{l}|>"),
        }
    }
}

impl Special {
    fn parse(line: &str) -> Option<Special> {
        let inner = line.strip_prefix("<|")?.strip_suffix("|>")?;
        Some(match inner {
            "sot" => Special::Sot,
            "eot" => Special::Eot,
            "pad" => Special::Pad,
            _ => Special::Lid(inner.strip_prefix("lid:")?.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Special(Special),
    Vocab(String),
}

/// Where a global id lives: a column of the special-token table or a
/// column of a vocabulary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(usize),
    Vocab(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    kinds: Vec<TokenKind>,
    special_ids: Vec<TokenId>,
    vocab_ids: Vec<TokenId>,
    by_text: HashMap<String, TokenId>,
    languages: Vec<(String, TokenId)>,
    max_token_chars: usize,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(vocab_tokens: &[S], languages: &[S]) -> Result<Self> {
        let mut tokens = vec![
            Token::Special(Special::Sot),
            Token::Special(Special::Eot),
            Token::Special(Special::Pad),
        ];
        tokens.extend(
            languages
                .iter()
                .map(|l| Token::Special(Special::Lid(l.as_ref().to_string()))),
        );
        tokens.extend(vocab_tokens.iter().map(|t| Token::Vocab(t.as_ref().to_string())));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            kinds: Vec::new(),
            special_ids: Vec::new(),
            vocab_ids: Vec::new(),
            by_text: HashMap::new(),
            languages: Vec::new(),
            max_token_chars: 0,
        };
        for t in tokens {
            v.push(t)?;
        }
        if v.tokens.len() < 3
            || v.tokens[SOT] != Token::Special(Special::Sot)
            || v.tokens[EOT] != Token::Special(Special::Eot)
            || v.tokens[PAD] != Token::Special(Special::Pad)
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <|sot|>, <|eot|>, <|pad|>".into(),
            ));
        }
        Ok(v)
    }

    fn push(&mut self, t: Token) -> Result<TokenId> {
        let id = self.tokens.len();
        match &t {
            Token::Special(s) => {
                if let Special::Lid(l) = s {
                    if self.languages.iter().any(|(n, _)| n == l) {
                        return Err(Error::LanguageExists(l.clone()));
                    }
                    self.languages.push((l.clone(), id));
                }
                self.kinds.push(TokenKind::Special(self.special_ids.len()));
                self.special_ids.push(id);
            }
            Token::Vocab(s) => {
                if s.is_empty() || s.contains('\n') || Special::parse(s).is_some() {
                    return Err(Error::InvalidArgument(format!("invalid vocab token {s:?}")));
                }
                if self.by_text.insert(s.clone(), id).is_some() {
                    return Err(Error::InvalidArgument(format!("duplicate vocab token {s:?}")));
                }
                self.max_token_chars = self.max_token_chars.max(s.chars().count());
                self.kinds.push(TokenKind::Vocab(self.vocab_ids.len()));
                self.vocab_ids.push(id);
            }
        }
        self.tokens.push(t);
        Ok(id)
    }

    /// Registers a new language, appending its LID token. Returns the new id.
    pub fn add_language(&mut self, name: &str) -> Result<TokenId> {
        self.push(Token::Special(Special::Lid(name.to_string())))
    }

    /// Total number of tokens (specials and vocabulary).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_specials(&self) -> usize {
        self.special_ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_ids.len()
    }

    /// Global ids of special tokens in special-table column order.
    pub fn special_ids(&self) -> &[TokenId] {
        &self.special_ids
    }

    /// Global ids of vocabulary tokens in base-table column order.
    pub fn vocab_ids(&self) -> &[TokenId] {
        &self.vocab_ids
    }

    pub fn kind(&self, id: TokenId) -> Result<TokenKind> {
        self.kinds.get(id).copied().ok_or(Error::UnknownTokenId(id))
    }

    pub fn is_vocab(&self, id: TokenId) -> bool {
        matches!(self.kinds.get(id), Some(TokenKind::Vocab(_)))
    }

    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.by_text.get(text).copied()
    }

    pub fn token_text(&self, id: TokenId) -> Result<String> {
        match self.tokens.get(id) {
            Some(Token::Vocab(s)) => Ok(s.clone()),
            Some(Token::Special(s)) => Ok(s.to_string()),
            None => Err(Error::UnknownTokenId(id)),
        }
    }

    /// Registered languages in registration order.
    pub fn languages(&self) -> Vec<String> {
        self.languages.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn has_language(&self, name: &str) -> bool {
        self.languages.iter().any(|(n, _)| n == name)
    }

    pub fn lid(&self, language: &str) -> Result<TokenId> {
        self.languages
            .iter()
            .find(|(n, _)| n == language)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    pub fn language_of_lid(&self, id: TokenId) -> Option<&str> {
        self.languages
            .iter()
            .find(|(_, t)| *t == id)
            .map(|(n, _)| n.as_str())
    }

    /// Greedy longest-match tokenization.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = self.max_token_chars.min(chars.len() - i);
            let found = (1..=longest).rev().find_map(|len| {
                let start = chars[i].0;
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                self.by_text.get(&text[start..end]).map(|&id| (id, len))
            });
            match found {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    return Err(Error::UnknownCharacter {
                        ch: chars[i].1,
                        offset: chars[i].0,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Concatenates vocabulary token strings; special tokens are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match self.tokens.get(id) {
                Some(Token::Vocab(s)) => out.push_str(s),
                Some(Token::Special(_)) => {}
                None => return Err(Error::UnknownTokenId(id)),
            }
        }
        Ok(out)
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            match t {
                Token::Special(s) => out.push_str(&s.to_string()),
                Token::Vocab(s) => out.push_str(s),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let tokens = body
            .split('\n')
            .map(|line| match Special::parse(line) {
                Some(s) => Token::Special(s),
                None => Token::Vocab(line.to_string()),
            })
            .collect();
        Self::from_tokens(tokens)
    }
}

/// Fraction of vocabulary tokens that occur at least once in `corpus`.
///
/// Special tokens count in neither numerator nor denominator.
pub fn token_coverage(corpus: &[TokenSeq], vocab: &Vocabulary) -> f64 {
    if vocab.vocab_size() == 0 {
        return 0.0;
    }
    let seen = distinct_vocab_tokens(corpus, vocab);
    seen.len() as f64 / vocab.vocab_size() as f64
}

/// Distinct vocabulary-token ids appearing in `corpus`, ascending.
pub fn distinct_vocab_tokens(corpus: &[TokenSeq], vocab: &Vocabulary) -> BTreeSet<TokenId> {
    corpus
        .iter()
        .flatten()
        .copied()
        .filter(|&id| vocab.is_vocab(id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::new(tokens, &["xx"]).unwrap()
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(vocab(&["ab", " "]).tokenize("").unwrap().is_empty());
    }

    #[test]
    fn direct_match() {
        let v = vocab(&["ab", " "]);
        let (ab, sp) = (v.id_of("ab").unwrap(), v.id_of(" ").unwrap());
        assert_eq!(v.tokenize("ab ab").unwrap(), vec![ab, sp, ab]);
        assert_eq!(v.detokenize(&[ab, sp, ab]).unwrap(), "ab ab");
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["a", "ab", "c", "abc"]);
        assert_eq!(v.tokenize("abc").unwrap(), vec![v.id_of("abc").unwrap()]);
        assert_eq!(v.detokenize(&[v.id_of("abc").unwrap()]).unwrap(), "abc");
    }

    #[test]
    fn unknown_character_is_an_error() {
        let err = vocab(&["a"]).tokenize("az").unwrap_err();
        assert!(matches!(err, Error::UnknownCharacter { ch: 'z', offset: 1 }));
    }

    #[test]
    fn detokenize_drops_specials_and_rejects_unknown_ids() {
        let v = vocab(&["a"]);
        let a = v.id_of("a").unwrap();
        assert_eq!(v.detokenize(&[SOT, v.lid("xx").unwrap(), a, EOT]).unwrap(), "a");
        assert!(matches!(v.detokenize(&[999]), Err(Error::UnknownTokenId(999))));
    }

    #[test]
    fn specials_come_first_and_lid_appends_never_renumber() {
        let mut v = Vocabulary::new(&["a", "b", " "], &["en", "de"]).unwrap();
        assert_eq!(v.num_specials(), 5);
        assert_eq!(v.vocab_ids(), &[5, 6, 7]);
        let before: Vec<String> = (0..v.len()).map(|i| v.token_text(i).unwrap()).collect();
        let lid = v.add_language("eo").unwrap();
        assert_eq!(lid, 8);
        for (i, t) in before.iter().enumerate() {
            assert_eq!(&v.token_text(i).unwrap(), t);
        }
        assert_eq!(v.kind(lid).unwrap(), TokenKind::Special(5));
        assert_eq!(v.language_of_lid(lid), Some("eo"));
        assert!(v.add_language("eo").is_err());
    }

    #[test]
    fn text_file_round_trip() {
        let mut v = Vocabulary::new(&["ka", " ", "to"], &["en"]).unwrap();
        v.add_language("eo").unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<|sot|>\n<|eot|>\n<|pad|>\n<|lid:en|>\nka\n \nto\n<|lid:eo|>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn coverage_examples() {
        let toks: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let v = Vocabulary::new(&toks, &["xx".to_string()]).unwrap();
        let ids = v.vocab_ids().to_vec();
        let corpus = vec![vec![SOT, ids[0], ids[1]], vec![ids[1], ids[2], EOT]];
        assert_eq!(token_coverage(&corpus, &v), 0.3);
        assert_eq!(token_coverage(&[ids.clone()], &v), 1.0);
        assert_eq!(token_coverage(&[], &v), 0.0);
    }

    proptest! {
        #[test]
        fn coverage_bounded_and_monotone_under_union(
            a in prop::collection::vec(prop::collection::vec(0usize..14, 0..6), 0..5),
            b in prop::collection::vec(prop::collection::vec(0usize..14, 0..6), 0..5),
        ) {
            let toks: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
            let v = Vocabulary::new(&toks, &["l1".to_string()]).unwrap();
            let ca = token_coverage(&a, &v);
            let mut ab = a.clone();
            ab.extend(b);
            let cab = token_coverage(&ab, &v);
            prop_assert!((0.0..=1.0).contains(&ca));
            prop_assert!(cab >= ca);
        }

        #[test]
        fn tokenize_round_trips_on_syllable_text(words in prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["ka", "to", "mi", "su"]), 1..4), 0..6)
        ) {
            let v = vocab(&["ka", "to", "mi", "su", " "]);
            let text = words.iter().map(|w| w.concat()).collect::<Vec<_>>().join(" ");
            let ids = v.tokenize(&text).unwrap();
            prop_assert_eq!(v.detokenize(&ids).unwrap(), text);
        }
    }
}
