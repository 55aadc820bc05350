//! Self-generated source text: run the model's own OCR instruction over each
//! sample image and cache the transcript per (model, decode config).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::modelkit::decode::{generate, DecodeConfig, ModelInterface};
use crate::pipeline::example::SourceProvenance;
use crate::pipeline::template::PromptTemplate;

pub const EMPTY_OUTPUT: &str = "empty-output";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfReviewRecord {
    pub sample_id: String,
    pub source_text: String,
    pub decode_hash: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Binds a transcript to the decode settings, the weights and the prompt
/// that produced it.
pub fn decode_hash(cfg: &DecodeConfig, model_fingerprint: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.digest().as_bytes());
    h.update([0]);
    h.update(model_fingerprint.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// File-system-safe form of a sample id. Ids that need rewriting get a
/// digest suffix so distinct ids never share a file.
pub fn cache_file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == sample_id && !safe.starts_with('.') {
        format!("{safe}.json")
    } else {
        let d = hex::encode(&Sha256::digest(sample_id.as_bytes())[..6]);
        format!("{safe}-{d}.json")
    }
}

pub fn cache_path(cache_dir: &Path, model_fingerprint: &str, sample_id: &str) -> PathBuf {
    cache_dir.join(model_fingerprint).join(cache_file_name(sample_id))
}

fn read_cached(path: &Path, sample_id: &str, hash: &str) -> Option<SelfReviewRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: SelfReviewRecord = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{}: unreadable cache entry ({e}); regenerating", path.display());
            return None;
        }
    };
    (rec.decode_hash == hash && rec.sample_id == sample_id).then_some(rec)
}

/// One record per sample, in dataset order. With a `cache_dir`, records whose
/// decode hash matches are reused without calling the model and fresh ones
/// are written atomically. Samples are processed in parallel.
pub fn generate_selfreview(
    model: &dyn ModelInterface,
    d: &Dataset,
    tmpl: &PromptTemplate,
    cfg: &DecodeConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<SelfReviewRecord>> {
    tmpl.validate()?;
    cfg.validate()?;
    let prompt_text = tmpl.instruction_text.clone();
    let prompt = model.tokenizer().encode(&prompt_text);
    let fingerprint = model.fingerprint();
    let hash = decode_hash(cfg, &fingerprint, &prompt_text);

    let records = d
        .samples
        .par_iter()
        .map(|s| {
            let path = cache_dir.map(|dir| cache_path(dir, &fingerprint, &s.id));
            if let Some(rec) = path.as_deref().and_then(|p| read_cached(p, &s.id, &hash)) {
                return Ok(rec);
            }
            let tokens = generate(model, &prompt, &s.image, cfg)?;
            let text = model.tokenizer().decode(&tokens);
            let warning = if text.trim().is_empty() {
                log::warn!("sample {:?}: self-review produced empty text", s.id);
                Some(EMPTY_OUTPUT.to_string())
            } else {
                None
            };
            let rec = SelfReviewRecord {
                sample_id: s.id.clone(),
                source_text: text,
                decode_hash: hash.clone(),
                created_at: chrono::Utc::now().to_rfc3339(),
                warning,
            };
            if let Some(p) = path {
                write_atomic(&p, serde_json::to_string_pretty(&rec)?.as_bytes())?;
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records)
}

/// Source texts available for building self-review examples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceIndex {
    pub self_generated: HashMap<String, SelfReviewRecord>,
    pub external_ocr: HashMap<String, String>,
}

impl SourceIndex {
    pub fn from_records(records: impl IntoIterator<Item = SelfReviewRecord>) -> Self {
        SourceIndex {
            self_generated: records.into_iter().map(|r| (r.sample_id.clone(), r)).collect(),
            external_ocr: HashMap::new(),
        }
    }

    pub fn with_external_ocr(mut self, texts: impl IntoIterator<Item = (String, String)>) -> Self {
        self.external_ocr.extend(texts);
        self
    }
}

/// The source text of the requested provenance; never falls back to another.
pub fn select_source(sample: &Sample, index: &SourceIndex, provenance: SourceProvenance) -> Result<String> {
    let found = match provenance {
        SourceProvenance::SelfGenerated => index.self_generated.get(&sample.id).map(|r| r.source_text.clone()),
        SourceProvenance::GroundTruth => sample.source_text.clone(),
        SourceProvenance::ExternalOcr => index.external_ocr.get(&sample.id).cloned(),
    };
    found.ok_or_else(|| Error::Provenance {
        sample_id: sample.id.clone(),
        provenance: provenance.as_str().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageRef;
    use crate::glyph::GlyphGrid;
    use crate::modelkit::decode::tests::ScriptedModel;
    use crate::modelkit::tokenizer::Tokenizer;
    use crate::modelkit::DecodeSession;
    use crate::corpus::Sample;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<M> {
        inner: M,
        calls: AtomicUsize,
    }

    impl<M: ModelInterface> ModelInterface for Counting<M> {
        fn tokenizer(&self) -> &Tokenizer {
            self.inner.tokenizer()
        }
        fn fingerprint(&self) -> String {
            self.inner.fingerprint()
        }
        fn begin<'a>(
            &'a self,
            image: Option<&ImageRef>,
            prompt: &[u32],
        ) -> Result<Box<dyn DecodeSession + 'a>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.begin(image, prompt)
        }
    }

    fn dataset() -> Dataset {
        let samples = ["s1", "s/2", "s3"]
            .iter()
            .map(|id| Sample::new(*id, ImageRef::glyphs(GlyphGrid::from_text("abc", 3)), "甲"))
            .collect();
        Dataset::new(samples, "test").unwrap()
    }

    #[test]
    fn cache_hit_and_miss() {
        let t = Tokenizer::toy();
        let m = Counting {
            inner: ScriptedModel { script: t.encode("abc"), tokenizer: t },
            calls: AtomicUsize::new(0),
        };
        let dir = tempfile::tempdir().unwrap();
        let d = dataset();
        let cfg = DecodeConfig::greedy(8);
        let a = generate_selfreview(&m, &d, &PromptTemplate::qwen(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 3);
        assert!(a.iter().all(|r| r.source_text == "abc" && r.warning.is_none()));
        assert_eq!(a.iter().map(|r| r.sample_id.as_str()).collect::<Vec<_>>(), ["s1", "s/2", "s3"]);

        let b = generate_selfreview(&m, &d, &PromptTemplate::qwen(), &cfg, Some(dir.path())).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 3);
        assert_eq!(a, b);

        let sampled = DecodeConfig::sample(8, 1.0, 0);
        let c = generate_selfreview(&m, &d, &PromptTemplate::qwen(), &sampled, Some(dir.path())).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 6);
        assert_ne!(c[0].decode_hash, a[0].decode_hash);
    }

    #[test]
    fn empty_output_is_flagged_not_failed() {
        let t = Tokenizer::toy();
        let m = ScriptedModel { script: vec![t.eos()], tokenizer: t };
        let recs = generate_selfreview(&m, &dataset(), &PromptTemplate::qwen(), &DecodeConfig::greedy(4), None).unwrap();
        assert!(recs.iter().all(|r| r.source_text.is_empty() && r.warning.as_deref() == Some(EMPTY_OUTPUT)));
    }

    #[test]
    fn file_names_are_safe_and_distinct() {
        assert_eq!(cache_file_name("s1"), "s1.json");
        assert_ne!(cache_file_name("a/b"), cache_file_name("a_b"));
        assert!(!cache_file_name("../x").contains('/'));
    }

    #[test]
    fn provenance_is_never_substituted() {
        let mut s = Sample::new("s1", ImageRef::glyphs(GlyphGrid::from_text("a", 1)), "甲");
        let rec = SelfReviewRecord {
            sample_id: "s1".into(),
            source_text: "abc".into(),
            decode_hash: "h".into(),
            created_at: "t".into(),
            warning: None,
        };
        let idx = SourceIndex::from_records([rec]).with_external_ocr([("s1".to_string(), "a b c".to_string())]);
        assert_eq!(select_source(&s, &idx, SourceProvenance::SelfGenerated).unwrap(), "abc");
        assert_eq!(select_source(&s, &idx, SourceProvenance::ExternalOcr).unwrap(), "a b c");
        assert!(matches!(
            select_source(&s, &idx, SourceProvenance::GroundTruth),
            Err(Error::Provenance { sample_id, .. }) if sample_id == "s1"
        ));
        s.source_text = Some("gt".into());
        assert_eq!(select_source(&s, &idx, SourceProvenance::GroundTruth).unwrap(), "gt");
        assert!(select_source(&s, &SourceIndex::default(), SourceProvenance::SelfGenerated).is_err());
    }
}
