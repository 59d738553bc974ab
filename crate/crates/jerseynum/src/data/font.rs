//! Built-in 5x7 stroke font for digit rendering. Keeping the glyphs in the
//! binary makes rendering hermetic and bit-deterministic across machines.

/// Glyph rows, top to bottom; `#` marks an inked cell.
const DIGIT_GLYPHS: [[&str; 7]; 10] = [
    [
        ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.",
    ],
    [
        "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
    ],
    [
        ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
    ],
    [
        "#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###.",
    ],
    [
        "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.",
    ],
    [
        "#####", "#....", "####.", "....#", "....#", "#...#", ".###.",
    ],
    [
        "..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.",
    ],
    [
        "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...",
    ],
    [
        ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.",
    ],
    [
        ".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..",
    ],
];

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

/// Whether font cell (`row`, `col`) of `digit` is inked. `bold` dilates the
/// stroke by one cell to the right in font space.
pub fn cell_on(digit: u8, row: usize, col: usize, bold: bool) -> bool {
    debug_assert!(digit <= 9);
    let rows = &DIGIT_GLYPHS[digit as usize];
    let on = |c: usize| rows[row].as_bytes()[c] == b'#';
    if on(col) {
        return true;
    }
    bold && col > 0 && on(col - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_well_formed() {
        for rows in &DIGIT_GLYPHS {
            for row in rows {
                assert_eq!(row.len(), GLYPH_COLS);
                assert!(row.bytes().all(|b| b == b'#' || b == b'.'));
            }
        }
    }

    #[test]
    fn every_digit_has_ink() {
        for d in 0..10u8 {
            let inked = (0..GLYPH_ROWS)
                .flat_map(|r| (0..GLYPH_COLS).map(move |c| (r, c)))
                .filter(|&(r, c)| cell_on(d, r, c, false))
                .count();
            assert!(inked >= 7, "digit {d} has only {inked} inked cells");
        }
    }

    #[test]
    fn digits_are_pairwise_distinct() {
        for a in 0..10u8 {
            for b in (a + 1)..10 {
                let same = (0..GLYPH_ROWS).all(|r| {
                    (0..GLYPH_COLS).all(|c| cell_on(a, r, c, false) == cell_on(b, r, c, false))
                });
                assert!(!same, "digits {a} and {b} render identically");
            }
        }
    }

    #[test]
    fn bold_is_a_superset() {
        for d in 0..10u8 {
            for r in 0..GLYPH_ROWS {
                for c in 0..GLYPH_COLS {
                    if cell_on(d, r, c, false) {
                        assert!(cell_on(d, r, c, true));
                    }
                }
            }
        }
    }
}
