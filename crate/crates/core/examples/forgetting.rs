//! Pretrains the toy model on glyph OCR, then fine-tunes two copies: one on
//! direct translation, one on self-review data. Prints OCR retention and
//! translation accuracy of both arms.
//!
//! cargo run --example forgetting -- [seed] [config.json] [cache-dir]

use std::time::Instant;

use ssr_core::harness::{forgetting_experiment_with, ExperimentConfig, ExperimentOptions};

fn main() -> ssr_core::Result<()> {
    env_logger::init();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = Instant::now();
    let cfg: ExperimentConfig = match std::env::args().nth(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).expect("readable config"))?,
        None => ExperimentConfig::default(),
    };
    let r = forgetting_experiment_with(&cfg, seed, &ExperimentOptions { run_dir: None, cache_dir: std::env::args().nth(3).map(Into::into) })?;
    let (ocr_sft, ocr_ssr) = r.ocr_ca();
    let (mt_sft, mt_ssr) = r.translation_ca();
    println!("seed {seed}: pretrained OCR CA {:.3}", r.pretrain_ocr_ca);
    println!("  sft_dimt  OCR CA {ocr_sft:.3}  translation CA {mt_sft:.3}  epoch losses {:?}", r.sft_dimt.epoch_losses);
    println!("  ssr       OCR CA {ocr_ssr:.3}  translation CA {mt_ssr:.3}  epoch losses {:?}", r.ssr.epoch_losses);
    println!("  {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
