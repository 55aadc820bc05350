use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::glyph::TARGET_GLYPHS;
use crate::pipeline::template;

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const TRANSLATION: &str = "<Translation>";
pub const ANSWER: &str = "<Answer>";

/// Greedy longest-match tokenizer over a fixed piece vocabulary with byte
/// fallback.
///
/// Ids are laid out as `[specials][pieces][256 bytes]`. Special-token and
/// piece literals occurring in text are matched greedily (longest first);
/// everything else is emitted byte by byte, so any string round-trips through
/// `decode(encode(s))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerSpec", into = "TokenizerSpec")]
pub struct Tokenizer {
    specials: Vec<String>,
    pieces: Vec<String>,
    separators: Vec<String>,
    lookup: HashMap<String, TokenId>,
    max_piece_len: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerSpec {
    specials: Vec<String>,
    pieces: Vec<String>,
    separators: Vec<String>,
}

impl From<TokenizerSpec> for Tokenizer {
    fn from(s: TokenizerSpec) -> Self {
        Tokenizer::new(s.specials, s.pieces, s.separators)
    }
}

impl From<Tokenizer> for TokenizerSpec {
    fn from(t: Tokenizer) -> Self {
        TokenizerSpec {
            specials: t.specials,
            pieces: t.pieces,
            separators: t.separators,
        }
    }
}

impl Tokenizer {
    /// `separators` must be a subset of `specials`; separator tokens restart
    /// response positions in the toy model.
    pub fn new(specials: Vec<String>, pieces: Vec<String>, separators: Vec<String>) -> Self {
        let mut lookup = HashMap::new();
        for (i, s) in specials.iter().chain(pieces.iter()).enumerate() {
            lookup.entry(s.clone()).or_insert(i as TokenId);
        }
        let max_piece_len = lookup.keys().map(String::len).max().unwrap_or(0);
        Tokenizer {
            specials,
            pieces,
            separators,
            lookup,
            max_piece_len,
        }
    }

    /// Byte-level tokenizer with only the control and separator specials.
    pub fn bytes_only() -> Self {
        Self::new(default_specials(), Vec::new(), default_separators())
    }

    /// The tokenizer bundled with the toy model: instruction words and the
    /// target glyph alphabet are single pieces.
    pub fn toy() -> Self {
        let mut pieces = template::instruction_words();
        pieces.extend(TARGET_GLYPHS.chars().map(String::from));
        Self::new(default_specials(), pieces, default_separators())
    }

    pub fn vocab_size(&self) -> usize {
        self.specials.len() + self.pieces.len() + 256
    }

    fn byte_offset(&self) -> TokenId {
        (self.specials.len() + self.pieces.len()) as TokenId
    }

    /// Id of a special token, if registered.
    pub fn special(&self, literal: &str) -> Option<TokenId> {
        self.specials
            .iter()
            .position(|s| s == literal)
            .map(|i| i as TokenId)
    }

    pub fn bos(&self) -> TokenId {
        self.special(BOS).expect("<bos> is always registered")
    }

    pub fn eos(&self) -> TokenId {
        self.special(EOS).expect("<eos> is always registered")
    }

    pub fn is_separator(&self, id: TokenId) -> bool {
        self.separators
            .iter()
            .any(|s| self.special(s) == Some(id))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - i);
            for len in (1..=longest).rev() {
                let end = i + len;
                if !text.is_char_boundary(end) || !text.is_char_boundary(i) {
                    continue;
                }
                if let Some(&id) = self.lookup.get(&text[i..end]) {
                    out.push(id);
                    i = end;
                    continue 'outer;
                }
            }
            out.push(self.byte_offset() + bytes[i] as TokenId);
            i += 1;
        }
        out
    }

    /// Concatenates the literal of every id; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut buf = Vec::new();
        for &id in ids {
            buf.extend_from_slice(&self.piece_bytes(id));
        }
        String::from_utf8_lossy(&buf).into_owned()
    }

    fn piece_bytes(&self, id: TokenId) -> Vec<u8> {
        let i = id as usize;
        let s = self.specials.len();
        let p = self.pieces.len();
        if i < s {
            self.specials[i].as_bytes().to_vec()
        } else if i < s + p {
            self.pieces[i - s].as_bytes().to_vec()
        } else if i < s + p + 256 {
            vec![(i - s - p) as u8]
        } else {
            Vec::new()
        }
    }
}

fn default_specials() -> Vec<String> {
    [BOS, EOS, TRANSLATION, ANSWER].iter().map(|s| s.to_string()).collect()
}

fn default_separators() -> Vec<String> {
    vec![TRANSLATION.to_string(), ANSWER.to_string()]
}
