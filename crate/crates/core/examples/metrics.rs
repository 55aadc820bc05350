//! Scores a few hypotheses with every metric.
//!
//! cargo run --example metrics

use ssr_core::metrics::{anls, bleu, bleu_pt, char_accuracy, steds, word_accuracy, Lang, ANLS_TAU};

fn main() -> ssr_core::Result<()> {
    let hyp = "# 标题\n\n这是一个测试。\n\n| a | b |\n|---|---|\n| 1 | 2 |";
    let reference = "# 标题\n\n这是一项测试。\n\n| a | b |\n|---|---|\n| 1 | 3 |";
    println!("BLEU     {:.2}", bleu(&[hyp], &[reference], Lang::Cjk)?);
    println!("BLEU-PT  {:.2}", bleu_pt(&[hyp], &[reference], Lang::Cjk)?);
    println!("STEDS    {:.4}", steds(hyp, reference));
    println!("STEDS    {:.4}  (table dropped)", steds("# 标题\n\n这是一个测试。", reference));
    println!("CA       {:.4}", char_accuracy("the quick brown fax", "the quick brown fox")?);
    println!("WA       {:.4}", word_accuracy("the quick brown fax", "the quick brown fox")?);
    println!("ANLS     {:.4}", anls("buildings", &["building", "tower"], ANLS_TAU)?);
    Ok(())
}
