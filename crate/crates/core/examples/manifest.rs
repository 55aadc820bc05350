//! Writes a small glyph-world manifest, loads it back and splits it.
//!
//! cargo run --example manifest

use ssr_core::corpus::{load_manifest, split, write_manifest, Dataset};
use ssr_core::harness::world::glyph_sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = ["abc", "hello", "gap", "face", "bead", "dim"]
        .iter()
        .enumerate()
        .map(|(i, t)| glyph_sample(format!("doc-{i}"), t, "glyph"))
        .collect();
    let dir = std::env::temp_dir().join("ssr-manifest-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("train.jsonl");
    write_manifest(&Dataset::new(samples, "train")?, &path)?;

    let d = load_manifest(&path)?;
    for s in &d.samples {
        println!("{}  {:?} -> {:?}", s.id, s.source_text.as_deref().unwrap_or(""), s.target_text);
    }
    let parts = split(&d, &[4, 2], 0)?;
    println!("split sizes: {} / {}", parts[0].len(), parts[1].len());
    Ok(())
}
