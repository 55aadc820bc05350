//! Invariants over the public API, checked on generated inputs.

use proptest::prelude::*;

use ssr_core::augment::merge;
use ssr_core::corpus::{manifest_to_string, parse_manifest, Dataset};
use ssr_core::glyph::{GlyphCipher, SOURCE_GLYPHS};
use ssr_core::harness::world::glyph_sample;
use ssr_core::metrics::{
    bleu, char_accuracy, levenshtein, tree_edit_distance, tree_similarity, Label, Lang, StructureTree,
};
use ssr_core::pipeline::example::{escape_specials, parse_ssr_response, render_ssr_response, unescape_specials};
use ssr_core::corpus::SyntheticProvenance;

const SPECIALS: [&str; 4] = ["<Translation>", "<Answer>", "<eos>", "<bos>"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-c \n<>\\\\甲]{0,3}",
            prop::sample::select(SPECIALS.to_vec()).prop_map(String::from),
            Just("<\\Answer>".to_string()),
        ],
        0..8,
    )
    .prop_map(|v| v.concat())
}

fn tree() -> impl Strategy<Value = StructureTree> {
    let label = prop::sample::select(vec![Label::Doc, Label::Paragraph, Label::Table, Label::Heading(1)]);
    label.clone().prop_map(StructureTree::leaf).prop_recursive(3, 12, 3, move |inner| {
        (label.clone(), prop::collection::vec(inner, 0..3)).prop_map(|(l, c)| StructureTree::node(l, c))
    })
}

proptest! {
    #[test]
    fn escape_round_trips(s in text()) {
        let e = escape_specials(&s);
        for sp in SPECIALS {
            prop_assert!(!e.contains(sp));
        }
        prop_assert_eq!(unescape_specials(&e), s);
    }

    #[test]
    fn layout_round_trips(x in text(), y in text()) {
        let r = render_ssr_response(&x, &y, "<Translation>");
        prop_assert_eq!(parse_ssr_response(&r, "<Translation>"), Some((x, y)));
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[ab甲]{0,10}", b in "[ab甲]{0,10}", c in "[ab甲]{0,10}") {
        let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
    }

    #[test]
    fn tree_distance_is_a_metric(a in tree(), b in tree(), c in tree()) {
        let ab = tree_edit_distance(&a, &b);
        prop_assert_eq!(ab, tree_edit_distance(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= a.size() + b.size());
        prop_assert!(tree_edit_distance(&a, &c) <= ab + tree_edit_distance(&b, &c));
        let s = tree_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn scores_are_bounded(h in "[a-d ,.]{0,30}", r in "[a-d ,.]{1,30}") {
        let b = bleu(&[&h], &[&r], Lang::Spaced).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        if r.chars().any(|c| !c.is_whitespace()) {
            let ca = char_accuracy(&h, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&ca));
        }
    }

    #[test]
    fn cipher_is_a_bijection(s in "[a-p]{0,20}") {
        let c = GlyphCipher::standard();
        let out = c.apply(&s);
        prop_assert_eq!(out.chars().count(), s.chars().count());
        let images: std::collections::HashSet<char> = SOURCE_GLYPHS.chars().map(|g| c.map_char(g)).collect();
        prop_assert_eq!(images.len(), SOURCE_GLYPHS.chars().count());
    }

    #[test]
    fn manifests_round_trip(texts in prop::collection::vec("[a-p]{1,6}", 1..10)) {
        let samples: Vec<_> = texts.iter().enumerate().map(|(i, t)| glyph_sample(format!("s{i}"), t, "glyph")).collect();
        let text = manifest_to_string(&samples).unwrap();
        let (back, warnings) = parse_manifest(&text, None).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(back, samples);
    }

    #[test]
    fn merge_without_dedup_keeps_everything(n_base in 1usize..6, targets in prop::collection::vec("[a-c]{1,2}", 0..8)) {
        let base = Dataset::new((0..n_base).map(|i| glyph_sample(format!("b{i}"), "ab", "glyph")).collect(), "train").unwrap();
        let synth: Vec<_> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut s = glyph_sample(format!("synth:{i}"), "a", "glyph");
                s.target_text = t.clone();
                s.provenance = Some(SyntheticProvenance { origin: "unsupervised".into(), ocr_model: "m".into(), translator: "t".into() });
                s
            })
            .collect();
        prop_assert_eq!(merge(&base, &synth, false).unwrap().len(), n_base + synth.len());
        let distinct: std::collections::HashSet<&String> = targets.iter().collect();
        let deduped = merge(&base, &synth, true).unwrap().len();
        prop_assert_eq!(deduped, n_base + distinct.len());
    }
}
