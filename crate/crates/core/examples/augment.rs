//! Transcribes unlabeled glyph images, translates the transcripts with the
//! offline cipher translator and merges the result into a base set.
//!
//! cargo run --example augment

use ssr_core::augment::{merge, synthesize, CipherTranslator, SynthOptions};
use ssr_core::corpus::{Dataset, ImageRef, Sample};
use ssr_core::glyph::GlyphGrid;
use ssr_core::harness::world::glyph_sample;
use ssr_core::modelkit::{DecodeConfig, ReferenceOcr};
use ssr_core::pipeline::template::PromptTemplate;

fn main() -> ssr_core::Result<()> {
    let base = Dataset::new(vec![glyph_sample("b0", "abc", "glyph")], "train")?;
    let images = ["cab", "abc", "", "pond"]
        .iter()
        .enumerate()
        .map(|(i, t)| Sample::new(format!("u{i}"), ImageRef::glyphs(GlyphGrid::from_text(t, 4)), ""))
        .collect();
    let images = Dataset::new(images, "unlabeled")?;
    let out = synthesize(
        &ReferenceOcr::default(),
        &images,
        &CipherTranslator::default(),
        &PromptTemplate::qwen(),
        &DecodeConfig::greedy(32),
        &SynthOptions::default(),
    )?;
    for s in &out.skipped {
        println!("skipped {}: {}", s.id, s.reason);
    }
    let merged = merge(&base, &out.samples, true)?;
    for s in &merged.samples {
        let origin = s.provenance.as_ref().map_or("labeled".to_string(), |p| format!("{} via {}", p.ocr_model, p.translator));
        println!("{:10} {:?} -> {:?}  [{origin}]", s.id, s.source_text.as_deref().unwrap_or(""), s.target_text);
    }
    Ok(())
}
