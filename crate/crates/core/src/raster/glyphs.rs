//! Embedded monochrome glyph bitmaps.
//!
//! Digits use a 5x7 sans design. Eye-chart letters follow the Sloan 5x5
//! construction (stroke width one fifth of the letter width); curved strokes
//! are approximated on the grid.

use std::collections::BTreeMap;

/// Monochrome bitmap, `true` = ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Glyph {
    fn parse(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows[0].len();
        let bits = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), width);
                r.bytes().map(|b| b == b'#')
            })
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn ink(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Nearest-neighbour lookup for a `w x h` rendering: pixel `(x, y)` maps
    /// to native cell `(x * width / w, y * height / h)`.
    pub fn sample(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        self.ink(x * self.width / w, y * self.height / h)
    }
}

#[derive(Debug, Clone)]
pub struct GlyphSet {
    pub glyphs: BTreeMap<char, Glyph>,
    pub native_height_px: usize,
}

impl GlyphSet {
    pub fn get(&self, symbol: char) -> Option<&Glyph> {
        self.glyphs.get(&symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    pub fn digits() -> Self {
        Self::build(&DIGITS)
    }

    pub fn sloan() -> Self {
        Self::build(&SLOAN)
    }

    fn build<const N: usize>(table: &[(char, [&str; N])]) -> Self {
        let glyphs = table
            .iter()
            .map(|(c, rows)| (*c, Glyph::parse(rows)))
            .collect();
        Self {
            glyphs,
            native_height_px: N,
        }
    }
}

const DIGITS: [(char, [&str; 7]); 10] = [
    ('0', [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
];

const SLOAN: [(char, [&str; 5]); 10] = [
    ('C', [".###.", "#...#", "#....", "#...#", ".###."]),
    ('D', ["####.", "#...#", "#...#", "#...#", "####."]),
    ('E', ["#####", "#....", "#####", "#....", "#####"]),
    ('F', ["#####", "#....", "#####", "#....", "#...."]),
    ('L', ["#....", "#....", "#....", "#....", "#####"]),
    ('N', ["#...#", "##..#", "#.#.#", "#..##", "#...#"]),
    ('O', [".###.", "#...#", "#...#", "#...#", ".###."]),
    ('P', ["####.", "#...#", "####.", "#....", "#...."]),
    ('T', ["#####", "..#..", "..#..", "..#..", "..#.."]),
    ('Z', ["#####", "...#.", "..#..", ".#...", "#####"]),
];
