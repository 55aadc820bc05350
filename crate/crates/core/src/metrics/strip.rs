//! Plain-text extraction: drops fenced code, markdown tables and math.

/// Removes fenced code blocks, table blocks (runs of `|` lines that include
/// a header-separator row) and math spans (`$$…$$`, `\[…\]`, `\(…\)`, and
/// single-line `$…$`). Text around an inline span is kept as is, spaces
/// included. Idempotent: passes repeat until nothing changes.
pub fn strip_plain(md: &str) -> String {
    let mut cur = md.to_string();
    loop {
        let next = strip_math(&strip_blocks(&cur));
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

pub(crate) fn is_fence(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("```") || t.starts_with("~~~")
}

/// `| --- | :-: |` style row.
pub(crate) fn is_table_separator(line: &str) -> bool {
    let t = line.trim();
    if !t.contains('-') || !t.contains('|') {
        return false;
    }
    t.trim_matches('|').split('|').all(|cell| {
        let c = cell.trim();
        let c = c.strip_prefix(':').unwrap_or(c);
        let c = c.strip_suffix(':').unwrap_or(c);
        !c.is_empty() && c.chars().all(|ch| ch == '-')
    })
}

/// Line-index ranges of table blocks.
pub(crate) fn table_runs(lines: &[&str]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].contains('|') {
            let start = i;
            while i < lines.len() && lines[i].contains('|') {
                i += 1;
            }
            if lines[start..i].iter().any(|l| is_table_separator(l)) {
                out.push((start, i));
            }
        } else {
            i += 1;
        }
    }
    out
}

fn strip_blocks(text: &str) -> String {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut keep = vec![true; lines.len()];
    let mut i = 0;
    while i < lines.len() {
        if is_fence(lines[i]) {
            let close = (i + 1..lines.len()).find(|&j| is_fence(lines[j]));
            // an unclosed fence runs to the end
            let end = close.map_or(lines.len(), |j| j + 1);
            keep[i..end].iter_mut().for_each(|k| *k = false);
            i = end;
        } else {
            i += 1;
        }
    }
    let kept: Vec<&str> = lines.iter().zip(&keep).filter(|(_, &k)| k).map(|(l, _)| *l).collect();
    let mut keep = vec![true; kept.len()];
    for (a, b) in table_runs(&kept) {
        keep[a..b].iter_mut().for_each(|k| *k = false);
    }
    kept.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(l, _)| *l)
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_math(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix("\\$") {
            out.push_str("\\$");
            rest = r;
            continue;
        }
        let span = if let Some(r) = rest.strip_prefix("$$") {
            r.find("$$").map(|e| 2 + e + 2)
        } else if let Some(r) = rest.strip_prefix("\\[") {
            r.find("\\]").map(|e| 2 + e + 2)
        } else if let Some(r) = rest.strip_prefix("\\(") {
            r.find("\\)").map(|e| 2 + e + 2)
        } else if let Some(r) = rest.strip_prefix('$') {
            let line = &r[..r.find('\n').unwrap_or(r.len())];
            line.find('$').filter(|&e| e > 0).map(|e| 1 + e + 1)
        } else {
            None
        };
        match span {
            Some(len) => rest = &rest[len..],
            None => {
                let c = rest.chars().next().expect("non-empty");
                out.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(strip_plain("text $x^2$ more"), "text  more");
        assert_eq!(strip_plain("| a | b |\n|---|---|\n| 1 | 2 |"), "");
        assert_eq!(strip_plain("para\n| a | b |\n| - | - |\nafter"), "para\nafter");
        assert_eq!(strip_plain("a | b without separator"), "a | b without separator");
        assert_eq!(strip_plain("x\n$$\n\\sum_i i\n$$\ny"), "x\n\ny");
        assert_eq!(strip_plain("a \\(b\\) c \\[d\\] e"), "a  c  e");
        assert_eq!(strip_plain("costs \\$5 and $"), "costs \\$5 and $");
        assert_eq!(strip_plain("```\ncode\n```\nprose"), "prose");
        assert_eq!(strip_plain("plain prose only."), "plain prose only.");
    }

    proptest! {
        #[test]
        fn idempotent(s in "([a-c $|\\-\n`\\\\()\\[\\]:])*") {
            let once = strip_plain(&s);
            prop_assert_eq!(strip_plain(&once), once);
        }
    }
}
