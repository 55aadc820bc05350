//! Generates self-review transcripts for a few glyph images with the
//! reference transcriber.
//!
//! cargo run --example selfreview

use ssr_core::corpus::Dataset;
use ssr_core::harness::world::glyph_sample;
use ssr_core::modelkit::{DecodeConfig, ReferenceOcr};
use ssr_core::pipeline::selfreview::generate_selfreview;
use ssr_core::pipeline::template::PromptTemplate;

fn main() -> ssr_core::Result<()> {
    let d = Dataset::new(vec![glyph_sample("a", "abc", "glyph"), glyph_sample("b", "pen", "glyph")], "train")?;
    // a noisy transcriber, so the transcripts differ from the ground truth
    let model = ReferenceOcr::default().with_noise(0.3, 7);
    let records = generate_selfreview(&model, &d, &PromptTemplate::qwen(), &DecodeConfig::greedy(32), None)?;
    for r in records {
        println!("{}: {:?} (hash {})", r.sample_id, r.source_text, &r.decode_hash[..12]);
    }
    Ok(())
}
