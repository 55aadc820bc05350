use crate::error::{Error, Result};

/// Unit-cost edit distance between two sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein_str(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b)
}

fn accuracy<T: PartialEq>(hyp: &[T], reference: &[T], unit: &str) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input(format!("reference has no {unit}s")));
    }
    let n = reference.len() as f64;
    let ed = levenshtein(hyp, reference) as f64;
    Ok(((n - ed) / n).max(0.0))
}

/// Character accuracy `max(0, (N - ED) / N)`, N the reference length in
/// characters.
pub fn char_accuracy(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    accuracy(&h, &r, "character")
}

/// Word accuracy over whitespace-separated tokens.
pub fn word_accuracy(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    accuracy(&h, &r, "word")
}

pub const ANLS_TAU: f64 = 0.5;

/// Best normalized similarity against any answer, zeroed below `tau`.
/// Comparison is case-insensitive.
pub fn anls<S: AsRef<str>>(prediction: &str, answers: &[S], tau: f64) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::Input("ANLS needs at least one answer".into()));
    }
    let p: Vec<char> = prediction.to_lowercase().chars().collect();
    let best = answers
        .iter()
        .map(|a| {
            let a: Vec<char> = a.as_ref().to_lowercase().chars().collect();
            let len = a.len().max(p.len());
            if len == 0 {
                1.0
            } else {
                1.0 - levenshtein(&a, &p) as f64 / len as f64
            }
        })
        .fold(0.0, f64::max);
    Ok(if best >= tau { best } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(levenshtein_str("", "abc"), 3);
        assert_eq!(levenshtein_str("kitten", "sitting"), 3);
        assert_eq!(levenshtein_str("甲乙", "甲乙"), 0);
        assert_eq!(char_accuracy("abc", "abc").unwrap(), 1.0);
        assert!((char_accuracy("abd", "abc").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(char_accuracy("abcdefghijkl", "ab").unwrap(), 0.0);
        assert!(char_accuracy("x", "").is_err());
        assert!((word_accuracy("a b d", "a b c").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((anls("buildings", &["building"], ANLS_TAU).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(anls("ABC", &["abc"], ANLS_TAU).unwrap(), 1.0);
        // similarity 0.4 falls under the threshold
        assert_eq!(anls("abcde", &["abfgh"], ANLS_TAU).unwrap(), 0.0);
        assert!(anls::<&str>("a", &[], ANLS_TAU).is_err());
    }

    proptest! {
        #[test]
        fn metric_axioms(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let ab = levenshtein_str(&a, &b);
            prop_assert_eq!(ab, levenshtein_str(&b, &a));
            prop_assert!(levenshtein_str(&a, &c) <= ab + levenshtein_str(&b, &c));
            prop_assert_eq!(ab == 0, a == b);
        }

        #[test]
        fn scores_in_unit_range(a in "\\PC{0,12}", b in "\\PC{1,12}") {
            let ca = char_accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ca));
            if !b.split_whitespace().next().is_none() {
                let wa = word_accuracy(&a, &b).unwrap();
                prop_assert!((0.0..=1.0).contains(&wa));
            }
            let s = anls(&a, &[&b], ANLS_TAU).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
