//! Markdown layout structure as an ordered labeled tree.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::strip::{is_fence, is_table_separator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Doc,
    Heading(u8),
    Paragraph,
    Table,
    Formula,
    List,
    Code,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Doc => f.write_str("doc"),
            Label::Heading(l) => write!(f, "h{l}"),
            Label::Paragraph => f.write_str("paragraph"),
            Label::Table => f.write_str("table"),
            Label::Formula => f.write_str("formula"),
            Label::List => f.write_str("list"),
            Label::Code => f.write_str("code"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureTree {
    pub label: Label,
    pub children: Vec<StructureTree>,
}

impl StructureTree {
    pub fn leaf(label: Label) -> Self {
        StructureTree { label, children: Vec::new() }
    }

    pub fn node(label: Label, children: Vec<StructureTree>) -> Self {
        StructureTree { label, children }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(StructureTree::size).sum::<usize>()
    }

    /// Labels in postorder.
    pub fn postorder(&self) -> Vec<Label> {
        let mut out = Vec::with_capacity(self.size());
        fn go(t: &StructureTree, out: &mut Vec<Label>) {
            for c in &t.children {
                go(c, out);
            }
            out.push(t.label);
        }
        go(self, &mut out);
        out
    }
}

/// `doc(h1(paragraph), table)` notation.
impl fmt::Display for StructureTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label)?;
        if !self.children.is_empty() {
            f.write_str("(")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{c}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

fn heading_level(line: &str) -> Option<u8> {
    let t = line.trim_start();
    let hashes = t.bytes().take_while(|&b| b == b'#').count();
    if (1..=6).contains(&hashes) {
        let rest = &t[hashes..];
        if rest.is_empty() || rest.starts_with(' ') || rest.starts_with('\t') {
            return Some(hashes as u8);
        }
    }
    None
}

fn is_list_item(line: &str) -> bool {
    let t = line.trim_start();
    if t.starts_with("- ") || t.starts_with("* ") || t.starts_with("+ ") {
        return true;
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    digits > 0 && (t[digits..].starts_with(". ") || t[digits..].starts_with(") "))
}

fn formula_close(line: &str) -> Option<&'static str> {
    let t = line.trim();
    if t.starts_with("$$") {
        Some("$$")
    } else if t.starts_with("\\[") {
        Some("\\]")
    } else {
        None
    }
}

/// Block sequence of a markdown document, headings carrying their level.
fn blocks(md: &str) -> Vec<Label> {
    let lines: Vec<&str> = md.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() {
            i += 1;
        } else if is_fence(line) {
            i += 1;
            while i < lines.len() && !is_fence(lines[i]) {
                i += 1;
            }
            i += 1;
            out.push(Label::Code);
        } else if let Some(level) = heading_level(line) {
            out.push(Label::Heading(level));
            i += 1;
        } else if let Some(close) = formula_close(line) {
            let body = &line.trim()[2..];
            if !body.contains(close) {
                i += 1;
                while i < lines.len() && !lines[i].contains(close) {
                    i += 1;
                }
            }
            i += 1;
            out.push(Label::Formula);
        } else if line.contains('|') {
            let start = i;
            while i < lines.len() && lines[i].contains('|') && !lines[i].trim().is_empty() {
                i += 1;
            }
            if lines[start..i].iter().any(|l| is_table_separator(l)) {
                out.push(Label::Table);
            } else {
                out.push(Label::Paragraph);
            }
        } else if is_list_item(line) {
            i += 1;
            while i < lines.len()
                && !lines[i].trim().is_empty()
                && (is_list_item(lines[i]) || lines[i].starts_with(' ') || lines[i].starts_with('\t'))
            {
                i += 1;
            }
            out.push(Label::List);
        } else {
            i += 1;
            while i < lines.len() {
                let l = lines[i];
                if l.trim().is_empty()
                    || is_fence(l)
                    || heading_level(l).is_some()
                    || formula_close(l).is_some()
                    || is_list_item(l)
                    || l.contains('|')
                {
                    break;
                }
                i += 1;
            }
            out.push(Label::Paragraph);
        }
    }
    out
}

/// Parses the block structure of `md`. A heading opens a scope that holds
/// every following block until a heading of the same or a higher level.
pub fn parse_structure_tree(md: &str) -> StructureTree {
    // arena: (label, children)
    let mut nodes: Vec<(Label, Vec<usize>)> = vec![(Label::Doc, Vec::new())];
    let mut open: Vec<(u8, usize)> = Vec::new();
    for b in blocks(md) {
        if let Label::Heading(level) = b {
            while open.last().is_some_and(|&(l, _)| l >= level) {
                open.pop();
            }
        }
        let parent = open.last().map_or(0, |&(_, n)| n);
        nodes.push((b, Vec::new()));
        let id = nodes.len() - 1;
        nodes[parent].1.push(id);
        if let Label::Heading(level) = b {
            open.push((level, id));
        }
    }
    fn build(nodes: &[(Label, Vec<usize>)], i: usize) -> StructureTree {
        StructureTree::node(nodes[i].0, nodes[i].1.iter().map(|&c| build(nodes, c)).collect())
    }
    build(&nodes, 0)
}
