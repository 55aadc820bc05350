//! Ordered labeled tree edit distance (Zhang-Shasha, unit costs) and the
//! similarity built on it.

use super::tree::{parse_structure_tree, Label, StructureTree};

struct Flat {
    labels: Vec<Label>,
    /// Postorder index of each node's leftmost leaf descendant.
    lmd: Vec<usize>,
    keyroots: Vec<usize>,
}

fn flatten(t: &StructureTree) -> Flat {
    fn go(t: &StructureTree, labels: &mut Vec<Label>, lmd: &mut Vec<usize>) -> usize {
        let mut first = None;
        for c in &t.children {
            let l = go(c, labels, lmd);
            first.get_or_insert(l);
        }
        let me = labels.len();
        labels.push(t.label);
        let l = first.unwrap_or(me);
        lmd.push(l);
        l
    }
    let mut labels = Vec::new();
    let mut lmd = Vec::new();
    go(t, &mut labels, &mut lmd);
    // keyroots: the highest node for each distinct leftmost leaf
    let n = labels.len();
    let mut seen = vec![false; n];
    let mut keyroots = Vec::new();
    for i in (0..n).rev() {
        if !seen[lmd[i]] {
            seen[lmd[i]] = true;
            keyroots.push(i);
        }
    }
    keyroots.sort_unstable();
    Flat { labels, lmd, keyroots }
}

/// Minimum number of node insertions, deletions and relabelings turning
/// `a` into `b`.
pub fn tree_edit_distance(a: &StructureTree, b: &StructureTree) -> usize {
    let fa = flatten(a);
    let fb = flatten(b);
    let (n, m) = (fa.labels.len(), fb.labels.len());
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &fa.keyroots {
        for &j in &fb.keyroots {
            let (li, lj) = (fa.lmd[i], fb.lmd[j]);
            // fd indices are offset by one: fd[x - li + 1][y - lj + 1]
            fd[0][0] = 0;
            for x in li..=i {
                fd[x - li + 1][0] = fd[x - li][0] + 1;
            }
            for y in lj..=j {
                fd[0][y - lj + 1] = fd[0][y - lj] + 1;
            }
            for x in li..=i {
                for y in lj..=j {
                    let (xi, yj) = (x - li + 1, y - lj + 1);
                    let del = fd[xi - 1][yj] + 1;
                    let ins = fd[xi][yj - 1] + 1;
                    if fa.lmd[x] == li && fb.lmd[y] == lj {
                        let rel = fd[xi - 1][yj - 1] + usize::from(fa.labels[x] != fb.labels[y]);
                        fd[xi][yj] = del.min(ins).min(rel);
                        td[x][y] = fd[xi][yj];
                    } else {
                        let sub = fd[fa.lmd[x] - li][fb.lmd[y] - lj] + td[x][y];
                        fd[xi][yj] = del.min(ins).min(sub);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

/// `1 - TED / max(|a|, |b|)`, clamped at 0: the distance can exceed the
/// larger size when the shapes disagree (a chain against a star).
pub fn tree_similarity(a: &StructureTree, b: &StructureTree) -> f64 {
    let max = a.size().max(b.size()) as f64;
    (1.0 - tree_edit_distance(a, b) as f64 / max).max(0.0)
}

/// Structure similarity of two markdown documents.
pub fn steds(hyp_md: &str, ref_md: &str) -> f64 {
    tree_similarity(&parse_structure_tree(hyp_md), &parse_structure_tree(ref_md))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    fn t(label: Label, children: Vec<StructureTree>) -> StructureTree {
        StructureTree::node(label, children)
    }

    #[test]
    fn examples() {
        let a = t(Doc, vec![t(Paragraph, vec![])]);
        let b = t(Doc, vec![t(Paragraph, vec![]), t(Table, vec![])]);
        assert_eq!(tree_edit_distance(&a, &a), 0);
        assert_eq!(tree_edit_distance(&a, &b), 1);
        assert_eq!(tree_edit_distance(&b, &a), 1);
        assert!((tree_similarity(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(steds("# x\ny", "# x\ny"), 1.0);
        // empty vs k children: delete-all
        let k = 4;
        let r = "para\n\n".repeat(k);
        assert!((steds("", &r) - (1.0 - k as f64 / (k + 1) as f64)).abs() < 1e-12);
    }

    #[test]
    fn classic_example() {
        // f(d(a, c(b)), e) vs f(c(d(a, b)), e): distance 2
        let x = t(Heading(6), vec![t(Heading(4), vec![t(Heading(1), vec![]), t(Heading(3), vec![t(Heading(2), vec![])])]), t(Heading(5), vec![])]);
        let y = t(Heading(6), vec![t(Heading(3), vec![t(Heading(4), vec![t(Heading(1), vec![]), t(Heading(2), vec![])])]), t(Heading(5), vec![])]);
        assert_eq!(tree_edit_distance(&x, &y), 2);
    }

    #[test]
    fn similarity_is_clamped() {
        // chain of 6 against a star of 6: only two nodes can be matched
        let mut chain = t(Paragraph, vec![]);
        for _ in 0..5 {
            chain = t(Paragraph, vec![chain]);
        }
        let star = t(Paragraph, (0..5).map(|_| t(Paragraph, vec![])).collect());
        assert_eq!(tree_edit_distance(&chain, &star), 8);
        assert_eq!(tree_similarity(&chain, &star), 0.0);
    }
}
