//! Word-level vocabulary with appendable control tokens.
//!
//! The pre-tokenizer splits on Unicode whitespace and isolates punctuation
//! into single-character tokens. The same splitting drives vocabulary
//! construction, text tokenization and word-image rendering, so "word"
//! means the same thing everywhere.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::TokenId;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Non-ASCII characters treated as punctuation by [`pretokenize`].
const EXTRA_PUNCT: &[char] = &[
    '«', '»', '¡', '¿', '·', '…', '‘', '’', '‚', '“', '”', '„', '‹', '›', '—', '–', '―', '‐',
    '′', '″', '、', '。', '〈', '〉', '《', '》', '「', '」', '『', '』', '【', '】', '！',
    '？', '：', '；', '，', '．', '؟', '،', '؛', '۔', '׳', '״',
];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCT.contains(&c)
}

/// Splits text into "words": runs of non-whitespace characters, with each
/// punctuation character emitted as its own token.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punct(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file {0:?} is missing the special tokens on lines 0-2")]
    BadSpecials(PathBuf),
    #[error("vocabulary file {0:?} has a duplicate token {1:?}")]
    DuplicateToken(PathBuf, String),
    #[error("token {0:?} contains a newline and cannot be serialized")]
    UnserializableToken(String),
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Bijective token <-> id map with dense ids.
///
/// Ids 0-2 are the specials (`<pad>`, `<eos>`, `<unk>`). Tokens added via
/// [`Vocabulary::extended`] (and the specials themselves) are matched
/// atomically inside raw text before pre-tokenization, so control tokens
/// like `<slt>` survive the punctuation splitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    /// Tokens matched as atomic units, longest first.
    atomic: Vec<String>,
    frozen_size: usize,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
            atomic: Vec::new(),
            frozen_size: 0,
        };
        for tok in [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            v.push_token(tok.to_string(), true);
        }
        v
    }

    fn push_token(&mut self, token: String, atomic: bool) -> TokenId {
        let id = self.id_to_token.len() as TokenId;
        self.token_to_id.insert(token.clone(), id);
        if atomic {
            self.atomic.push(token.clone());
            self.atomic.sort_by_key(|t| std::cmp::Reverse(t.len()));
        }
        self.id_to_token.push(token);
        id
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn unk_id(&self) -> TokenId {
        2
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Size before any extension tokens were appended.
    pub fn frozen_size(&self) -> usize {
        self.frozen_size
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Returns a copy with the comma-separated tokens appended.
    ///
    /// Already-known tokens are skipped silently, so extending twice with
    /// the same list is a no-op. New tokens are matched atomically when
    /// tokenizing.
    pub fn extended(&self, new_tokens: &str) -> Vocabulary {
        let mut out = self.clone();
        for piece in new_tokens.split(',') {
            let tok = piece.trim();
            if tok.is_empty() || out.token_to_id.contains_key(tok) {
                continue;
            }
            out.push_token(tok.to_string(), true);
        }
        out
    }

    /// Converts text to ids. Atomic tokens (specials and extension tokens)
    /// match as units; the rest is pre-tokenized, with out-of-vocabulary
    /// words mapping to `<unk>`. No `<eos>` is appended.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        let mut plain = String::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for atom in &self.atomic {
                if rest.starts_with(atom.as_str()) {
                    self.flush_plain(&mut plain, &mut ids);
                    ids.push(self.token_to_id[atom]);
                    rest = &rest[atom.len()..];
                    continue 'outer;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            plain.push(c);
            rest = &rest[c.len_utf8()..];
        }
        self.flush_plain(&mut plain, &mut ids);
        ids
    }

    fn flush_plain(&self, plain: &mut String, ids: &mut Vec<TokenId>) {
        if plain.is_empty() {
            return;
        }
        for tok in pretokenize(plain) {
            ids.push(self.id_of(&tok).unwrap_or_else(|| self.unk_id()));
        }
        plain.clear();
    }

    /// Joins tokens with single spaces, dropping the specials.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id <= self.unk_id() {
                continue;
            }
            if let Some(tok) = self.token_of(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// Serializes one token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        std::fs::write(path, self.serialize()?).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn serialize(&self) -> Result<String, VocabError> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            if tok.contains('\n') || tok.contains('\r') {
                return Err(VocabError::UnserializableToken(tok.clone()));
            }
            out.push_str(tok);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary, VocabError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[0] != PAD_TOKEN || lines[1] != EOS_TOKEN || lines[2] != UNK_TOKEN
        {
            return Err(VocabError::BadSpecials(path.to_path_buf()));
        }
        let mut vocab = Vocabulary::with_specials();
        for line in &lines[3..] {
            if vocab.token_to_id.contains_key(*line) {
                return Err(VocabError::DuplicateToken(path.to_path_buf(), line.to_string()));
            }
            // Reloaded tokens that look like control tokens stay atomic.
            let atomic = line.starts_with('<') && line.ends_with('>');
            vocab.push_token(line.to_string(), atomic);
        }
        vocab.frozen_size = vocab.size();
        Ok(vocab)
    }

    /// SHA-256 of the serialized vocabulary; stored in checkpoints to catch
    /// incompatible model/vocabulary pairings.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let bytes = self.serialize().unwrap_or_default();
        let digest = Sha256::digest(bytes.as_bytes());
        digest.into()
    }
}

/// Builds a vocabulary from a text corpus.
///
/// Tokens appearing fewer than `min_count` times map to `<unk>`. Kept
/// tokens are assigned ids in order of first occurrence, which makes the
/// build deterministic for a fixed corpus order.
pub fn build_vocabulary<I, S>(corpus: I, min_count: usize) -> Result<Vocabulary, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for line in corpus {
        for tok in pretokenize(line.as_ref()) {
            let entry = counts.entry(tok.clone()).or_insert(0);
            if *entry == 0 {
                order.push(tok);
            }
            *entry += 1;
        }
    }
    if order.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut vocab = Vocabulary::with_specials();
    for tok in order {
        if counts[&tok] >= min_count {
            vocab.push_token(tok, false);
        }
    }
    vocab.frozen_size = vocab.size();
    Ok(vocab)
}
