use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Low-rank adapter settings. `targets` are glob patterns (`*` matches any
/// run of characters) over linear sublayer names such as `layers.0.attn.q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub init_seed: u64,
}

impl Default for AdapterConfig {
    /// Rank 16, alpha 16, every linear layer of the decoder stack (embedding
    /// tables and the output head are excluded).
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 16.0,
            targets: vec!["layers.*".into()],
            init_seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn new(rank: usize, alpha: f64, targets: &[&str]) -> Self {
        AdapterConfig {
            rank,
            alpha,
            targets: targets.iter().map(|s| s.to_string()).collect(),
            init_seed: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn selects(&self, layer: &str) -> bool {
        self.targets.iter().any(|p| glob_match(p, layer))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("adapter alpha must be positive".into()));
        }
        Ok(())
    }
}

/// `*` matches any (possibly empty) substring; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Trainable factors for one frozen linear layer: `y += scale * (x A) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    /// Index into the owning model's linear-layer list.
    pub linear: usize,
    /// `[fan_in, rank]`, randomly initialised.
    pub a: Array2<f64>,
    /// `[rank, fan_out]`, zero-initialised.
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub layers: Vec<LoraLayer>,
    /// Fingerprint of the base model the adapter was attached to.
    pub base_fingerprint: String,
}

impl Adapter {
    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob() {
        assert!(glob_match("layers.*", "layers.0.attn.q"));
        assert!(glob_match("*.attn.*", "layers.1.attn.o"));
        assert!(glob_match("head", "head"));
        assert!(!glob_match("head", "heads"));
        assert!(!glob_match("layers.*", "head"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxbyy"));
    }

    #[test]
    fn validation() {
        assert!(AdapterConfig::new(0, 16.0, &["*"]).validate().is_err());
        assert!(AdapterConfig::new(1, 0.0, &["*"]).validate().is_err());
        assert!(AdapterConfig::default().validate().is_ok());
    }
}
