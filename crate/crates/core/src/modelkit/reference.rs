//! A non-learned model that transcribes glyph grids, whatever the prompt.
//! Stands in for an external OCR engine in the glyph world.

use sha2::{Digest, Sha256};

use crate::corpus::ImageRef;
use crate::glyph::SOURCE_GLYPHS;
use crate::error::{Error, Result};

use super::decode::{DecodeSession, ModelInterface};
use super::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone)]
pub struct ReferenceOcr {
    tokenizer: Tokenizer,
    noise: f64,
    seed: u64,
}

impl ReferenceOcr {
    /// An exact transcriber.
    pub fn new(tokenizer: Tokenizer) -> Self {
        ReferenceOcr { tokenizer, noise: 0.0, seed: 0 }
    }

    /// Replaces each source glyph with another one with probability `rate`.
    /// The corruption is a pure function of `(seed, transcript, index)`.
    pub fn with_noise(mut self, rate: f64, seed: u64) -> Self {
        self.noise = rate.clamp(0.0, 1.0);
        self.seed = seed;
        self
    }

    fn read(&self, text: &str) -> String {
        if self.noise == 0.0 {
            return text.to_string();
        }
        let glyphs: Vec<char> = SOURCE_GLYPHS.chars().collect();
        text.chars()
            .enumerate()
            .map(|(i, c)| {
                let Some(at) = glyphs.iter().position(|&g| g == c) else { return c };
                let mut h = Sha256::new();
                h.update(self.seed.to_le_bytes());
                h.update(text.as_bytes());
                h.update((i as u64).to_le_bytes());
                let d = h.finalize();
                let u = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
                if u < self.noise {
                    glyphs[(at + 1 + d[8] as usize % (glyphs.len() - 1)) % glyphs.len()]
                } else {
                    c
                }
            })
            .collect()
    }
}

impl Default for ReferenceOcr {
    fn default() -> Self {
        ReferenceOcr::new(Tokenizer::toy())
    }
}

struct Session {
    script: Vec<TokenId>,
    step: usize,
    eos: TokenId,
    logits: Vec<f64>,
}

impl Session {
    fn refresh(&mut self) {
        self.logits.iter_mut().for_each(|l| *l = 0.0);
        let next = self.script.get(self.step).copied().unwrap_or(self.eos);
        self.logits[next as usize] = 1.0;
    }
}

impl DecodeSession for Session {
    fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn push(&mut self, _token: TokenId) -> Result<()> {
        self.step += 1;
        self.refresh();
        Ok(())
    }
}

impl ModelInterface for ReferenceOcr {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn fingerprint(&self) -> String {
        if self.noise == 0.0 {
            "reference-ocr".into()
        } else {
            format!("reference-ocr-n{}-s{}", self.noise, self.seed)
        }
    }

    fn begin<'a>(&'a self, image: Option<&ImageRef>, _prompt: &[TokenId]) -> Result<Box<dyn DecodeSession + 'a>> {
        let grid = image
            .and_then(ImageRef::as_grid)
            .ok_or_else(|| Error::Input("reference OCR needs a glyph-grid image".into()))?;
        let mut s = Session {
            script: self.tokenizer.encode(&self.read(&grid.transcription())),
            step: 0,
            eos: self.tokenizer.eos(),
            logits: vec![0.0; self.tokenizer.vocab_size()],
        };
        s.refresh();
        Ok(Box::new(s))
    }
}
