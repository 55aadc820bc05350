//! Fine-tunes a low-rank adapter on a toy model and prints the loss trace.
//!
//! cargo run --example train

use ssr_core::glyph::{GlyphCipher, GlyphGrid};
use ssr_core::corpus::ImageRef;
use ssr_core::modelkit::{AdapterConfig, ModelInterface, Tokenizer, ToyConfig, ToyModel};
use ssr_core::pipeline::example::build_ssr_example;
use ssr_core::pipeline::template::PromptTemplate;
use ssr_core::training::{train, TrainConfig};

fn main() -> ssr_core::Result<()> {
    let base = ToyModel::new(ToyConfig { width: 32, heads: 2, layers: 1, ..ToyConfig::default() }, Tokenizer::toy())?;
    let mut model = base.attach_adapter(&AdapterConfig { rank: 4, alpha: 8.0, ..AdapterConfig::default() })?;
    let data = ["abc", "dog", "hem", "pig", "fan", "oak"]
        .iter()
        .map(|x| {
            let y = GlyphCipher::standard().apply(x);
            Ok(build_ssr_example(x, &y, &PromptTemplate::qwen(), model.tokenizer())?
                .with_image(ImageRef::glyphs(GlyphGrid::from_text(x, 0))))
        })
        .collect::<ssr_core::Result<Vec<_>>>()?;
    let cfg = TrainConfig { epochs: 20, batch_size: 3, peak_lr: 1e-2, seed: 1, ..TrainConfig::default() };
    let out = train(&mut model, &data, &cfg, None)?;
    for s in out.trace.steps.iter().step_by(8) {
        println!("step {:3}  lr {:.5}  loss {:.4}", s.step, s.lr, s.loss);
    }
    println!("epoch means {:?}", out.trace.epoch_means);
    println!("adapter {}", model.adapter_checksum().unwrap_or_default());
    Ok(())
}
