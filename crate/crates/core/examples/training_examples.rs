//! Builds the same glyph image into a self-review example, a direct
//! translation example and a text-only translation example, and shows what
//! each one trains on.
//!
//! cargo run --example training_examples

use ssr_core::glyph::{GlyphCipher, GlyphGrid};
use ssr_core::corpus::ImageRef;
use ssr_core::modelkit::Tokenizer;
use ssr_core::pipeline::example::{build_sft_dimt_example, build_sft_mt_example, build_ssr_example, TrainingExample};
use ssr_core::pipeline::template::PromptTemplate;

fn show(name: &str, ex: &TrainingExample, tok: &Tokenizer) {
    println!("{name}");
    println!("  instruction: {:?}", tok.decode(&ex.instruction_tokens));
    println!("  response:    {:?}", ex.response_text(tok));
    println!("  scored tokens: {} of {}", ex.masked_count(), ex.response_tokens.len());
}

fn main() -> ssr_core::Result<()> {
    let tok = Tokenizer::toy();
    let x = "bead";
    let y = GlyphCipher::standard().apply(x);
    let image = ImageRef::glyphs(GlyphGrid::from_text(x, 0));
    // the transcript comes from the model itself; here it misreads one glyph
    let ssr = build_ssr_example("beae", &y, &PromptTemplate::qwen(), &tok)?.with_image(image.clone());
    show("ssr", &ssr, &tok);
    show("sft_dimt", &build_sft_dimt_example(&y, &tok)?.with_image(image), &tok);
    show("sft_mt", &build_sft_mt_example(x, &y, &tok)?, &tok);
    Ok(())
}
