use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<blank>", "<unk>", "<sos>", "<eos>"];

/// A vocabulary entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Blank,
    Unk,
    Sos,
    Eos,
    Lang(String),
    Char(char),
}

impl Token {
    fn render(&self) -> String {
        match self {
            Token::Blank => RESERVED[0].into(),
            Token::Unk => RESERVED[1].into(),
            Token::Sos => RESERVED[2].into(),
            Token::Eos => RESERVED[3].into(),
            Token::Lang(l) => format!("<{l}>"),
            Token::Char(c) => c.to_string(),
        }
    }
}

/// Universal character vocabulary.
///
/// Layout: `0 = blank, 1 = unk, 2 = sos, 3 = eos`, then one language-ID token
/// per language in lexicographic order, then characters by code point.
/// Vocabularies grown by [`Vocabulary::extend_chars`] or
/// [`Vocabulary::extend_language`] append after the existing tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    langs: BTreeMap<String, usize>,
    chars: BTreeMap<char, usize>,
}

impl Vocabulary {
    /// Builds the table from `(language, transcripts)` pairs. Input order does
    /// not matter.
    pub fn build<S: AsRef<str>>(corpora: &[(String, Vec<S>)]) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::Invalid("vocabulary needs at least one language".into()));
        }
        let mut langs = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for (lang, texts) in corpora {
            if texts.is_empty() {
                return Err(Error::EmptyTranscripts(lang.clone()));
            }
            langs.insert(lang.clone());
            for t in texts {
                chars.extend(t.as_ref().chars());
            }
        }
        let mut tokens = vec![Token::Blank, Token::Unk, Token::Sos, Token::Eos];
        tokens.extend(langs.into_iter().map(Token::Lang));
        tokens.extend(chars.into_iter().map(Token::Char));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        let mut langs = BTreeMap::new();
        let mut chars = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let expected_reserved = i < NUM_RESERVED;
            let is_reserved = matches!(t, Token::Blank | Token::Unk | Token::Sos | Token::Eos);
            if expected_reserved != is_reserved || (is_reserved && t.render() != RESERVED[i]) {
                return Err(Error::Invalid(format!("token {i} breaks the reserved layout")));
            }
            let dup = match t {
                Token::Lang(l) => langs.insert(l.clone(), i).is_some(),
                Token::Char(c) => chars.insert(*c, i).is_some(),
                _ => false,
            };
            if dup {
                return Err(Error::Invalid(format!("duplicate token {}", t.render())));
            }
        }
        Ok(Vocabulary { tokens, langs, chars })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&Token> {
        self.tokens.get(index)
    }

    pub fn lang_id(&self, lang: &str) -> Result<usize> {
        self.langs
            .get(lang)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn char_id(&self, c: char) -> usize {
        self.chars.get(&c).copied().unwrap_or(UNK)
    }

    pub fn is_lang_id(&self, index: usize) -> bool {
        matches!(self.tokens.get(index), Some(Token::Lang(_)))
    }

    /// Language-ID token indices in table order.
    pub fn lang_ids(&self) -> Vec<usize> {
        self.langs.values().copied().collect()
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.langs.keys().map(String::as_str)
    }

    /// Language name for a language-ID index.
    pub fn lang_name(&self, index: usize) -> Option<&str> {
        match self.tokens.get(index) {
            Some(Token::Lang(l)) => Some(l),
            _ => None,
        }
    }

    /// `[langID(lang)]` followed by one index per character; unseen
    /// characters map to `unk`.
    pub fn encode(&self, text: &str, lang: &str) -> Result<Vec<usize>> {
        let mut out = vec![self.lang_id(lang)?];
        out.extend(text.chars().map(|c| self.char_id(c)));
        Ok(out)
    }

    /// Character indices only, without the language-ID prefix.
    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    /// Renders character tokens back into text. Special and language-ID
    /// tokens are dropped; `unk` renders as U+FFFD.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| match self.tokens.get(i) {
                Some(Token::Char(c)) => Some(*c),
                Some(Token::Unk) => Some('\u{FFFD}'),
                _ => None,
            })
            .collect()
    }

    /// Appends characters not yet in the table. Returns the number added;
    /// existing indices are untouched.
    pub fn extend_chars<I: IntoIterator<Item = char>>(&mut self, chars: I) -> usize {
        let new: BTreeSet<char> = chars.into_iter().filter(|c| !self.chars.contains_key(c)).collect();
        for c in &new {
            self.chars.insert(*c, self.tokens.len());
            self.tokens.push(Token::Char(*c));
        }
        new.len()
    }

    /// Appends a language-ID token unless present; returns its index.
    pub fn extend_language(&mut self, lang: &str) -> usize {
        if let Some(&i) = self.langs.get(lang) {
            return i;
        }
        let i = self.tokens.len();
        self.langs.insert(lang.to_string(), i);
        self.tokens.push(Token::Lang(lang.to_string()));
        i
    }

    /// True when `self` is `other` with zero or more tokens appended.
    pub fn extends(&self, other: &Vocabulary) -> bool {
        self.tokens.len() >= other.tokens.len() && self.tokens[..other.tokens.len()] == other.tokens[..]
    }

    /// One token per line; line number is the index.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{}", t.render());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let tok = if i < NUM_RESERVED {
                match line {
                    "<blank>" => Token::Blank,
                    "<unk>" => Token::Unk,
                    "<sos>" => Token::Sos,
                    "<eos>" => Token::Eos,
                    other => return Err(Error::Invalid(format!("line {i}: expected reserved token, got {other:?}"))),
                }
            } else if line.chars().count() == 1 {
                Token::Char(line.chars().next().unwrap_or_default())
            } else if line.len() > 2 && line.starts_with('<') && line.ends_with('>') {
                Token::Lang(line[1..line.len() - 1].to_string())
            } else {
                return Err(Error::Invalid(format!("line {i}: unrecognized token {line:?}")));
            };
            tokens.push(tok);
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s).map_err(|e| Error::Parse {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
