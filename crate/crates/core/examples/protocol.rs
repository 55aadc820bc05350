//! Evaluates the reference transcriber under the OCR protocol and shows how
//! a self-review output is split at the separator.
//!
//! cargo run --example protocol

use ssr_core::harness::world::glyph_sample;
use ssr_core::harness::{run_protocol, split_at_separator, EvalItem, EvalRecipe, ProtocolConfig};
use ssr_core::modelkit::tokenizer::TRANSLATION;
use ssr_core::modelkit::{ReferenceOcr, Tokenizer};

fn main() -> ssr_core::Result<()> {
    let items: Vec<EvalItem> = ["abc", "pond", "kelp"]
        .iter()
        .enumerate()
        .map(|(i, t)| EvalItem::ocr(glyph_sample(format!("t{i}"), t, "glyph")))
        .collect();
    let model = ReferenceOcr::default().with_noise(0.2, 3);
    let report = run_protocol(EvalRecipe::Base, &model, &items, &ProtocolConfig::default())?;
    for (task, r) in &report.reports {
        println!("{task:?}: CA {:?}", r.corpus.ca);
    }

    let tok = Tokenizer::toy();
    let sep = tok.special(TRANSLATION).expect("separator registered");
    let mut generated = tok.encode("abc");
    generated.push(sep);
    generated.extend(tok.encode(&ssr_core::glyph::GlyphCipher::standard().apply("abc")));
    let out = split_at_separator(&generated, sep, |ids| tok.decode(ids));
    println!("transcript {:?}, translation {:?}", out.ocr_text, out.translation);
    Ok(())
}
