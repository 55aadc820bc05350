//! Corpus BLEU-4 with brevity penalty.
//!
//! Tokenization depends on the target language: for Chinese, Japanese and
//! Korean every CJK character is a token; otherwise text is split on
//! whitespace and every punctuation character is its own token.
//!
//! An order with matched count 0 (but at least one hypothesis n-gram) gets
//! precision `SMOOTH_EPSILON / total`. Orders for which the whole corpus has
//! no hypothesis n-gram are left out of the geometric mean, so a corpus of
//! short sentences scored against itself still gets 100.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const SMOOTH_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lang {
    Cjk,
    Spaced,
}

impl Lang {
    /// From a language tag (`zh`, `ja-JP`) or pair (`en-zh`): the target
    /// side decides.
    pub fn from_tag(tag: &str) -> Lang {
        let parts: Vec<&str> = tag.split(['-', '_']).collect();
        // "zh-CN": an upper-case second part is a region, not a language
        let lang = match parts.as_slice() {
            [l, region] if region.len() == 2 && region.chars().all(|c| c.is_ascii_uppercase()) => l,
            _ => parts.last().unwrap_or(&tag),
        };
        if matches!(lang.to_ascii_lowercase().as_str(), "zh" | "ja" | "ko") {
            Lang::Cjk
        } else {
            Lang::Spaced
        }
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x1100..=0x11FF | 0x2E80..=0x2FDF | 0x3000..=0x30FF | 0x3130..=0x318F
        | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xAC00..=0xD7AF | 0xF900..=0xFAFF
        | 0xFE30..=0xFE4F | 0xFF00..=0xFFEF | 0x20000..=0x2FA1F)
}

pub fn tokenize(text: &str, lang: Lang) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |w: &mut String, out: &mut Vec<String>| {
        if !w.is_empty() {
            out.push(std::mem::take(w));
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_ascii_punctuation() || (lang == Lang::Cjk && is_cjk(c)) || (!c.is_alphanumeric() && !c.is_ascii()) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Sufficient statistics of one (hypothesis, reference) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Score in [0, 100].
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let p = if self.matches[n] == 0 {
                SMOOTH_EPSILON / self.totals[n] as f64
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

pub fn pair_stats(hyp: &[String], reference: &[String]) -> BleuStats {
    let mut s = BleuStats { hyp_len: hyp.len(), ref_len: reference.len(), ..BleuStats::default() };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

/// Corpus BLEU over pre-tokenized pairs.
pub fn corpus_bleu_tokens(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Input("BLEU needs at least one pair".into()));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&pair_stats(h, r));
    }
    Ok(total.score())
}

pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], lang: Lang) -> Result<f64> {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s.as_ref(), lang)).collect();
    let r: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s.as_ref(), lang)).collect();
    corpus_bleu_tokens(&h, &r)
}

/// BLEU after removing formulas, tables and code from both sides.
pub fn bleu_pt<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], lang: Lang) -> Result<f64> {
    let h: Vec<String> = hyps.iter().map(|s| super::strip::strip_plain(s.as_ref())).collect();
    let r: Vec<String> = refs.iter().map(|s| super::strip::strip_plain(s.as_ref())).collect();
    bleu(&h, &r, lang)
}
