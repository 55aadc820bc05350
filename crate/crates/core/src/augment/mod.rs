//! Synthetic training pairs from unlabeled images: the model transcribes
//! each image, an external translator supplies the target, and the result is
//! merged into an existing training set with provenance attached.

pub mod translator;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Sample, SyntheticProvenance};
use crate::error::{Error, Result};
use crate::modelkit::decode::{generate, DecodeConfig, ModelInterface};
use crate::pipeline::template::PromptTemplate;

pub use translator::{
    with_retry, Attempt, CipherTranslator, HttpTranslator, HttpTranslatorConfig, RetryPolicy, TranslatorClient,
};

pub const SYNTH_PREFIX: &str = "synth:";
pub const ORIGIN_UNSUPERVISED: &str = "unsupervised";
pub const EMPTY_SOURCE: &str = "empty-source";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Maximum translator calls in flight.
    pub concurrency: usize,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { concurrency: 4, src_lang: "en".into(), tgt_lang: "zh".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub samples: Vec<Sample>,
    pub skipped: Vec<Skip>,
}

pub fn synthetic_id(origin_id: &str) -> String {
    format!("{SYNTH_PREFIX}{origin_id}")
}

/// Transcribes every image with `model` under the template's OCR
/// instruction and translates the transcript. Images whose transcript is
/// empty or whose translation fails are skipped with a reason; outputs keep
/// input order.
pub fn synthesize(
    model: &dyn ModelInterface,
    images: &Dataset,
    translator: &dyn TranslatorClient,
    tmpl: &PromptTemplate,
    cfg: &DecodeConfig,
    opts: &SynthOptions,
) -> Result<SynthOutcome> {
    tmpl.validate()?;
    cfg.validate()?;
    if opts.concurrency == 0 {
        return Err(Error::Config("concurrency must be at least 1".into()));
    }
    if images.is_empty() {
        return Ok(SynthOutcome::default());
    }
    let prompt = model.tokenizer().encode(&tmpl.instruction_text);
    let sources = images
        .samples
        .par_iter()
        .map(|s| Ok(model.tokenizer().decode(&generate(model, &prompt, &s.image, cfg)?)))
        .collect::<Result<Vec<String>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency)
        .build()
        .map_err(|e| Error::Config(format!("translator pool: {e}")))?;
    let targets: Vec<std::result::Result<String, String>> = pool.install(|| {
        sources
            .par_iter()
            .map(|src| {
                if src.trim().is_empty() {
                    return Err(EMPTY_SOURCE.to_string());
                }
                translator
                    .translate(src, &opts.src_lang, &opts.tgt_lang)
                    .map_err(|e| format!("translator: {e}"))
            })
            .collect()
    });

    let provenance = SyntheticProvenance {
        origin: ORIGIN_UNSUPERVISED.into(),
        ocr_model: model.fingerprint(),
        translator: translator.id(),
    };
    let mut out = SynthOutcome::default();
    for ((img, src), tgt) in images.samples.iter().zip(sources).zip(targets) {
        match tgt {
            Ok(target) => out.samples.push(Sample {
                id: synthetic_id(&img.id),
                image: img.image.clone(),
                target_text: target,
                source_text: Some(src),
                domain: img.domain.clone(),
                lang_pair: format!("{}-{}", opts.src_lang, opts.tgt_lang),
                provenance: Some(provenance.clone()),
            }),
            Err(reason) => {
                log::warn!("skipping {:?}: {reason}", img.id);
                out.skipped.push(Skip { id: img.id.clone(), reason });
            }
        }
    }
    if out.samples.is_empty() {
        let first = &out.skipped[0];
        return Err(Error::Translator(format!(
            "all {} samples failed; first: {} ({})",
            out.skipped.len(),
            first.id,
            first.reason
        )));
    }
    Ok(out)
}

/// Appends synthetic samples to `base`. Every synthetic sample must carry
/// provenance and no id may collide. With `dedup`, a synthetic sample whose
/// target already occurs in the output is dropped.
pub fn merge(base: &Dataset, synth: &[Sample], dedup: bool) -> Result<Dataset> {
    let mut ids: HashSet<&str> = base.ids().collect();
    let mut targets: HashSet<&str> = base.samples.iter().map(|s| s.target_text.as_str()).collect();
    let mut samples = base.samples.clone();
    for s in synth {
        if s.provenance.is_none() {
            return Err(Error::Validation(format!("synthetic sample {:?} has no provenance", s.id)));
        }
        if !ids.insert(&s.id) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
        if dedup && !targets.insert(&s.target_text) {
            log::info!("dropping {:?}: duplicate target", s.id);
            continue;
        }
        samples.push(s.clone());
    }
    let mut out = Dataset::new(samples, base.split_name.clone())?;
    out.manifest_path = base.manifest_path.clone();
    Ok(out)
}
