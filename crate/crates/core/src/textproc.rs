//! Vocabulary construction and greedy longest-match-first WordPiece
//! tokenization.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const CONTINUATION: &str = "##";

pub const RESERVED: [&str; 3] = [PAD, UNK, CLS];

/// A word segmenting into more pieces than this becomes `[UNK]`.
pub const MAX_PIECES_PER_WORD: usize = 100;

pub const DEFAULT_MAX_LEN: usize = 32;

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. Reserved tokens must
    /// come first, in [`RESERVED`] order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format(format!("vocab line {i} must be {r}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn unk_id(&self) -> TokenId {
        1
    }

    pub fn cls_id(&self) -> TokenId {
        2
    }

    /// Whitespace split, lowercase, then greedy longest-match-first pieces.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let lowered = text.to_lowercase();
        let mut out = Vec::new();
        for word in lowered.split_whitespace() {
            match self.segment_word(word) {
                Some(pieces) => out.extend(pieces),
                None => out.push(self.unk_id()),
            }
        }
        out
    }

    fn segment_word(&self, word: &str) -> Option<Vec<TokenId>> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            if pieces.len() > MAX_PIECES_PER_WORD {
                return None;
            }
            start = end;
        }
        Some(pieces)
    }

    /// Joins pieces back into words, dropping continuation markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            if tok == CLS || tok == PAD {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Frequency-ranked whole words (ties broken lexicographically) followed by
/// single-character fallback pieces, after the reserved tokens.
pub fn build_vocab<I, S>(corpus: I, max_size: usize, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocab max_size {max_size} cannot hold the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut chars = BTreeSet::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for word in line.as_ref().to_lowercase().split_whitespace() {
            chars.extend(word.chars());
            *counts.entry(word.to_string()).or_default() += 1;
        }
    }
    if lines == 0 {
        return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    let fallback = chars
        .iter()
        .map(|c| c.to_string())
        .chain(chars.iter().map(|c| format!("{CONTINUATION}{c}")));
    for tok in words.into_iter().map(|(w, _)| w).chain(fallback) {
        if tokens.len() >= max_size {
            break;
        }
        if seen.insert(tok.clone()) {
            tokens.push(tok);
        }
    }
    Vocab::from_tokens(tokens)
}

/// A graph node's text and its encoder input ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub node_id: usize,
    pub text: String,
    pub token_ids: Vec<TokenId>,
}

/// `[CLS]` followed by the text's pieces, truncated to `max_len`.
pub fn encode_query(vocab: &Vocab, node_id: usize, text: &str, max_len: usize) -> Query {
    let max_len = max_len.max(1);
    let mut token_ids = Vec::with_capacity(max_len);
    token_ids.push(vocab.cls_id());
    token_ids.extend(vocab.tokenize(text).into_iter().take(max_len - 1));
    Query {
        node_id,
        text: text.to_string(),
        token_ids,
    }
}
