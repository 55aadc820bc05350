use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ImageRef;
use crate::error::{Error, Result};
use crate::modelkit::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Empty means "the tokenizer's end-of-sequence token".
    #[serde(default)]
    pub stop_tokens: BTreeSet<TokenId>,
}

fn one() -> f64 {
    1.0
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_new_tokens,
            temperature: 1.0,
            seed: 0,
            stop_tokens: BTreeSet::new(),
        }
    }

    pub fn sample(max_new_tokens: usize, temperature: f64, seed: u64) -> Self {
        DecodeConfig {
            strategy: Strategy::Sample,
            max_new_tokens,
            temperature,
            seed,
            stop_tokens: BTreeSet::new(),
        }
    }

    pub fn with_stop(mut self, id: TokenId) -> Self {
        self.stop_tokens.insert(id);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.strategy == Strategy::Sample && !(self.temperature > 0.0) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        Ok(())
    }

    /// Stable digest of every field that influences generation.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        if canon.strategy == Strategy::Greedy {
            canon.temperature = 1.0;
            canon.seed = 0;
        }
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Incremental decoding state: positioned after the prompt, it exposes the
/// logits for the next token.
pub trait DecodeSession {
    fn logits(&self) -> &[f64];
    fn push(&mut self, token: TokenId) -> Result<()>;
}

/// The contract a multimodal model exposes to the pipeline.
///
/// `begin` encodes the image (when given) and the instruction tokens and
/// returns a session ready to predict the first response token.
pub trait ModelInterface: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;

    /// Stable identity of the weights (base plus any adapter).
    fn fingerprint(&self) -> String;

    fn begin<'a>(
        &'a self,
        image: Option<&ImageRef>,
        prompt: &[TokenId],
    ) -> Result<Box<dyn DecodeSession + 'a>>;

    fn has_adapter(&self) -> bool {
        false
    }
}

/// Generates a response to `prompt` about `image`.
///
/// Returns at most `cfg.max_new_tokens` tokens; generation stops at the first
/// stop token, which is not included. Greedy decoding breaks logit ties
/// towards the lowest id.
pub fn generate(
    model: &dyn ModelInterface,
    prompt: &[TokenId],
    image: &ImageRef,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    generate_with(model, prompt, Some(image), cfg)
}

/// As [`generate`], with an optional image (text-only prompts).
pub fn generate_with(
    model: &dyn ModelInterface,
    prompt: &[TokenId],
    image: Option<&ImageRef>,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input("prompt must not be empty".into()));
    }
    let stops: BTreeSet<TokenId> = if cfg.stop_tokens.is_empty() {
        [model.tokenizer().eos()].into()
    } else {
        cfg.stop_tokens.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut session = model.begin(image, prompt)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        let next = match cfg.strategy {
            Strategy::Greedy => argmax(session.logits()),
            Strategy::Sample => sample(session.logits(), cfg.temperature, &mut rng),
        };
        if stops.contains(&next) {
            break;
        }
        out.push(next);
        if out.len() < cfg.max_new_tokens {
            session.push(next)?;
        }
    }
    Ok(out)
}

pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i as TokenId;
        }
    }
    (weights.len() - 1) as TokenId
}
