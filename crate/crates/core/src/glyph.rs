//! Synthetic glyph-grid images and the fixed glyph cipher used as a stand-in
//! translation.
//!
//! A grid is a rectangle of cells, each either a glyph character or blank
//! (written `.`). Its transcription reads rows top to bottom, drops trailing
//! blanks in every row, renders interior blanks as spaces and joins rows with
//! `\n`; trailing empty rows are omitted.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const BLANK: char = '.';

/// Source-side glyph alphabet.
pub const SOURCE_GLYPHS: &str = "abcdefghijklmnop";
/// Target-side glyph alphabet (one CJK character per source glyph).
pub const TARGET_GLYPHS: &str = "甲乙丙丁戊己庚辛壬癸子丑寅卯辰巳";

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GlyphGrid {
    cols: usize,
    cells: Vec<Vec<Option<char>>>,
}

impl GlyphGrid {
    /// Builds a grid from row strings; `.` is blank. Rows are right-padded to
    /// the widest row.
    pub fn from_rows<S: AsRef<str>>(rows: &[S]) -> Self {
        let cells: Vec<Vec<Option<char>>> = rows
            .iter()
            .map(|r| {
                r.as_ref()
                    .chars()
                    .map(|c| (c != BLANK).then_some(c))
                    .collect()
            })
            .collect();
        let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
        let cells = cells
            .into_iter()
            .map(|mut r| {
                r.resize(cols, None);
                r
            })
            .collect();
        GlyphGrid { cols, cells }
    }

    /// Lays `text` out line by line, padding every row to at least `width` cells.
    pub fn from_text(text: &str, width: usize) -> Self {
        let rows: Vec<String> = text
            .split('\n')
            .map(|line| {
                let mut row: String = line.chars().map(|c| if c == ' ' { BLANK } else { c }).collect();
                let n = row.chars().count();
                row.extend(std::iter::repeat(BLANK).take(width.saturating_sub(n)));
                row
            })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> Option<char> {
        self.cells.get(row).and_then(|r| r.get(col).copied().flatten())
    }

    /// Iterates `(row, col, glyph)` over every cell in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, Option<char>)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, g)| (r, c, *g)))
    }

    pub fn row_strings(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|r| r.iter().map(|g| g.unwrap_or(BLANK)).collect())
            .collect()
    }

    /// The reading-order transcription of the grid.
    pub fn transcription(&self) -> String {
        let mut lines: Vec<String> = self
            .cells
            .iter()
            .map(|row| {
                let end = row.iter().rposition(Option::is_some).map_or(0, |p| p + 1);
                row[..end].iter().map(|g| g.unwrap_or(' ')).collect()
            })
            .collect();
        while lines.last().is_some_and(String::is_empty) {
            lines.pop();
        }
        lines.join("\n")
    }
}

impl fmt::Debug for GlyphGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("GlyphGrid").field(&self.row_strings()).finish()
    }
}

impl Serialize for GlyphGrid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.row_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GlyphGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        Ok(GlyphGrid::from_rows(&rows))
    }
}

/// A bijection between the source and target glyph alphabets, applied
/// character-wise. It is an involution over the union of both alphabets;
/// every other character passes through unchanged.
#[derive(Debug, Clone)]
pub struct GlyphCipher {
    forward: HashMap<char, char>,
    backward: HashMap<char, char>,
}

impl GlyphCipher {
    /// The fixed cipher `source[i] -> target[(5 i + 3) mod 16]`.
    pub fn standard() -> Self {
        let src: Vec<char> = SOURCE_GLYPHS.chars().collect();
        let tgt: Vec<char> = TARGET_GLYPHS.chars().collect();
        let n = src.len();
        let mut forward = HashMap::new();
        let mut backward = HashMap::new();
        for (i, &s) in src.iter().enumerate() {
            let t = tgt[(5 * i + 3) % n];
            forward.insert(s, t);
            backward.insert(t, s);
        }
        GlyphCipher { forward, backward }
    }

    pub fn map_char(&self, c: char) -> char {
        self.forward
            .get(&c)
            .or_else(|| self.backward.get(&c))
            .copied()
            .unwrap_or(c)
    }

    pub fn apply(&self, text: &str) -> String {
        text.chars().map(|c| self.map_char(c)).collect()
    }
}
