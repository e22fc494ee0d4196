//! Word-image rendering: one fixed-size grayscale bitmap per pre-token.
//!
//! Glyphs come from an embedded 8x8 monospace bitmap font (printable
//! ASCII); other scripts can be supplied as a JSON glyph table mapping
//! decimal codepoints to eight row bitmasks (bit 0 = leftmost pixel).
//! Codepoints without a glyph render as a solid block and are counted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array3;
use thiserror::Error;

use super::vocab::pretokenize;
use crate::signal::ImageSequence;

/// Glyph rendered for codepoints missing from the table.
pub const FALLBACK_GLYPH: [u8; 8] = [0xFF; 8];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("glyph table {path:?}: {detail}")]
    BadGlyphTable { path: PathBuf, detail: String },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Codepoint -> 8x8 bitmap rows.
#[derive(Debug, Clone)]
pub struct GlyphTable {
    glyphs: BTreeMap<char, [u8; 8]>,
}

impl GlyphTable {
    /// The embedded printable-ASCII font.
    pub fn embedded() -> Self {
        let mut glyphs = BTreeMap::new();
        for (i, rows) in FONT_8X8_BASIC.iter().enumerate() {
            let c = (0x20 + i as u32) as u8 as char;
            glyphs.insert(c, *rows);
        }
        GlyphTable { glyphs }
    }

    /// Loads a JSON map `{"<decimal codepoint>": [r0..r7], ...}` and merges
    /// it over the embedded font.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RenderError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: BTreeMap<String, Vec<u8>> =
            serde_json::from_str(&text).map_err(|e| RenderError::BadGlyphTable {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        let mut table = GlyphTable::embedded();
        for (key, rows) in raw {
            let cp: u32 = key.parse().map_err(|_| RenderError::BadGlyphTable {
                path: path.to_path_buf(),
                detail: format!("key {key:?} is not a decimal codepoint"),
            })?;
            let c = char::from_u32(cp).ok_or_else(|| RenderError::BadGlyphTable {
                path: path.to_path_buf(),
                detail: format!("codepoint {cp} is not a valid character"),
            })?;
            if rows.len() != 8 {
                return Err(RenderError::BadGlyphTable {
                    path: path.to_path_buf(),
                    detail: format!("glyph for {key:?} has {} rows, expected 8", rows.len()),
                });
            }
            let mut glyph = [0u8; 8];
            glyph.copy_from_slice(&rows);
            table.glyphs.insert(c, glyph);
        }
        Ok(table)
    }

    pub fn get(&self, c: char) -> Option<&[u8; 8]> {
        self.glyphs.get(&c)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

/// Renders pre-tokens into fixed-geometry grayscale images.
pub struct WordRenderer {
    table: GlyphTable,
    height: usize,
    width: usize,
    scale: usize,
    missing_glyphs: AtomicU64,
}

impl WordRenderer {
    pub fn new(table: GlyphTable, height: usize, width: usize) -> Self {
        assert!(height >= 8 && width >= 8, "image geometry must fit a glyph");
        let scale = if height >= 16 { 2 } else { 1 };
        WordRenderer {
            table,
            height,
            width,
            scale,
            missing_glyphs: AtomicU64::new(0),
        }
    }

    /// Number of fallback glyphs rendered so far.
    pub fn missing_glyph_count(&self) -> u64 {
        self.missing_glyphs.load(Ordering::Relaxed)
    }

    /// Splits `text` into words and renders one `[height, width]` image per
    /// word. Token count always equals the pre-tokenizer's.
    pub fn render_word_images(&self, text: &str) -> ImageSequence {
        let tokens = pretokenize(text);
        let mut images = Array3::<u8>::zeros((tokens.len(), self.height, self.width));
        for (i, token) in tokens.iter().enumerate() {
            let mut image = images.index_axis_mut(ndarray::Axis(0), i);
            let cell = 8 * self.scale;
            let y0 = self.height.saturating_sub(cell) / 2;
            for (col, c) in token.chars().enumerate() {
                let x0 = col * cell;
                if x0 >= self.width {
                    break; // overlong token truncated at the right edge
                }
                let glyph = match self.table.get(c) {
                    Some(g) => g,
                    None => {
                        self.missing_glyphs.fetch_add(1, Ordering::Relaxed);
                        &FALLBACK_GLYPH
                    }
                };
                for (gy, row) in glyph.iter().enumerate() {
                    for gx in 0..8 {
                        if row & (1 << gx) == 0 {
                            continue;
                        }
                        for sy in 0..self.scale {
                            for sx in 0..self.scale {
                                let y = y0 + gy * self.scale + sy;
                                let x = x0 + gx * self.scale + sx;
                                if y < self.height && x < self.width {
                                    image[[y, x]] = 255;
                                }
                            }
                        }
                    }
                }
            }
        }
        ImageSequence {
            images,
            source_tokens: tokens,
        }
    }
}

/// Classic public-domain 8x8 bitmap font, codepoints 0x20..=0x7E.
/// Each entry is eight rows top to bottom; bit `1 << x` is the pixel at
/// column `x` (leftmost = bit 0).
#[rustfmt::skip]
const FONT_8X8_BASIC: [[u8; 8]; 95] = [
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], // ' '
    [0x18, 0x3C, 0x3C, 0x18, 0x18, 0x00, 0x18, 0x00], // '!'
    [0x36, 0x36, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], // '"'
    [0x36, 0x36, 0x7F, 0x36, 0x7F, 0x36, 0x36, 0x00], // '#'
    [0x0C, 0x3E, 0x03, 0x1E, 0x30, 0x1F, 0x0C, 0x00], // '$'
    [0x00, 0x63, 0x33, 0x18, 0x0C, 0x66, 0x63, 0x00], // '%'
    [0x1C, 0x36, 0x1C, 0x6E, 0x3B, 0x33, 0x6E, 0x00], // '&'
    [0x06, 0x06, 0x03, 0x00, 0x00, 0x00, 0x00, 0x00], // '\''
    [0x18, 0x0C, 0x06, 0x06, 0x06, 0x0C, 0x18, 0x00], // '('
    [0x06, 0x0C, 0x18, 0x18, 0x18, 0x0C, 0x06, 0x00], // ')'
    [0x00, 0x66, 0x3C, 0xFF, 0x3C, 0x66, 0x00, 0x00], // '*'
    [0x00, 0x0C, 0x0C, 0x3F, 0x0C, 0x0C, 0x00, 0x00], // '+'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C, 0x06], // ','
    [0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x00, 0x00], // '-'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C, 0x00], // '.'
    [0x60, 0x30, 0x18, 0x0C, 0x06, 0x03, 0x01, 0x00], // '/'
    [0x3E, 0x63, 0x73, 0x7B, 0x6F, 0x67, 0x3E, 0x00], // '0'
    [0x0C, 0x0E, 0x0C, 0x0C, 0x0C, 0x0C, 0x3F, 0x00], // '1'
    [0x1E, 0x33, 0x30, 0x1C, 0x06, 0x33, 0x3F, 0x00], // '2'
    [0x1E, 0x33, 0x30, 0x1C, 0x30, 0x33, 0x1E, 0x00], // '3'
    [0x38, 0x3C, 0x36, 0x33, 0x7F, 0x30, 0x78, 0x00], // '4'
    [0x3F, 0x03, 0x1F, 0x30, 0x30, 0x33, 0x1E, 0x00], // '5'
    [0x1C, 0x06, 0x03, 0x1F, 0x33, 0x33, 0x1E, 0x00], // '6'
    [0x3F, 0x33, 0x30, 0x18, 0x0C, 0x0C, 0x0C, 0x00], // '7'
    [0x1E, 0x33, 0x33, 0x1E, 0x33, 0x33, 0x1E, 0x00], // '8'
    [0x1E, 0x33, 0x33, 0x3E, 0x30, 0x18, 0x0E, 0x00], // '9'
    [0x00, 0x0C, 0x0C, 0x00, 0x00, 0x0C, 0x0C, 0x00], // ':'
    [0x00, 0x0C, 0x0C, 0x00, 0x00, 0x0C, 0x0C, 0x06], // ';'
    [0x18, 0x0C, 0x06, 0x03, 0x06, 0x0C, 0x18, 0x00], // '<'
    [0x00, 0x00, 0x3F, 0x00, 0x00, 0x3F, 0x00, 0x00], // '='
    [0x06, 0x0C, 0x18, 0x30, 0x18, 0x0C, 0x06, 0x00], // '>'
    [0x1E, 0x33, 0x30, 0x18, 0x0C, 0x00, 0x0C, 0x00], // '?'
    [0x3E, 0x63, 0x7B, 0x7B, 0x7B, 0x03, 0x1E, 0x00], // '@'
    [0x0C, 0x1E, 0x33, 0x33, 0x3F, 0x33, 0x33, 0x00], // 'A'
    [0x3F, 0x66, 0x66, 0x3E, 0x66, 0x66, 0x3F, 0x00], // 'B'
    [0x3C, 0x66, 0x03, 0x03, 0x03, 0x66, 0x3C, 0x00], // 'C'
    [0x1F, 0x36, 0x66, 0x66, 0x66, 0x36, 0x1F, 0x00], // 'D'
    [0x7F, 0x46, 0x16, 0x1E, 0x16, 0x46, 0x7F, 0x00], // 'E'
    [0x7F, 0x46, 0x16, 0x1E, 0x16, 0x06, 0x0F, 0x00], // 'F'
    [0x3C, 0x66, 0x03, 0x03, 0x73, 0x66, 0x7C, 0x00], // 'G'
    [0x33, 0x33, 0x33, 0x3F, 0x33, 0x33, 0x33, 0x00], // 'H'
    [0x1E, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x1E, 0x00], // 'I'
    [0x78, 0x30, 0x30, 0x30, 0x33, 0x33, 0x1E, 0x00], // 'J'
    [0x67, 0x66, 0x36, 0x1E, 0x36, 0x66, 0x67, 0x00], // 'K'
    [0x0F, 0x06, 0x06, 0x06, 0x46, 0x66, 0x7F, 0x00], // 'L'
    [0x63, 0x77, 0x7F, 0x7F, 0x6B, 0x63, 0x63, 0x00], // 'M'
    [0x63, 0x67, 0x6F, 0x7B, 0x73, 0x63, 0x63, 0x00], // 'N'
    [0x1C, 0x36, 0x63, 0x63, 0x63, 0x36, 0x1C, 0x00], // 'O'
    [0x3F, 0x66, 0x66, 0x3E, 0x06, 0x06, 0x0F, 0x00], // 'P'
    [0x1E, 0x33, 0x33, 0x33, 0x3B, 0x1E, 0x38, 0x00], // 'Q'
    [0x3F, 0x66, 0x66, 0x3E, 0x36, 0x66, 0x67, 0x00], // 'R'
    [0x1E, 0x33, 0x07, 0x0E, 0x38, 0x33, 0x1E, 0x00], // 'S'
    [0x3F, 0x2D, 0x0C, 0x0C, 0x0C, 0x0C, 0x1E, 0x00], // 'T'
    [0x33, 0x33, 0x33, 0x33, 0x33, 0x33, 0x3F, 0x00], // 'U'
    [0x33, 0x33, 0x33, 0x33, 0x33, 0x1E, 0x0C, 0x00], // 'V'
    [0x63, 0x63, 0x63, 0x6B, 0x7F, 0x77, 0x63, 0x00], // 'W'
    [0x63, 0x63, 0x36, 0x1C, 0x1C, 0x36, 0x63, 0x00], // 'X'
    [0x33, 0x33, 0x33, 0x1E, 0x0C, 0x0C, 0x1E, 0x00], // 'Y'
    [0x7F, 0x63, 0x31, 0x18, 0x4C, 0x66, 0x7F, 0x00], // 'Z'
    [0x1E, 0x06, 0x06, 0x06, 0x06, 0x06, 0x1E, 0x00], // '['
    [0x03, 0x06, 0x0C, 0x18, 0x30, 0x60, 0x40, 0x00], // '\\'
    [0x1E, 0x18, 0x18, 0x18, 0x18, 0x18, 0x1E, 0x00], // ']'
    [0x08, 0x1C, 0x36, 0x63, 0x00, 0x00, 0x00, 0x00], // '^'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xFF], // '_'
    [0x0C, 0x0C, 0x18, 0x00, 0x00, 0x00, 0x00, 0x00], // '`'
    [0x00, 0x00, 0x1E, 0x30, 0x3E, 0x33, 0x6E, 0x00], // 'a'
    [0x07, 0x06, 0x06, 0x3E, 0x66, 0x66, 0x3B, 0x00], // 'b'
    [0x00, 0x00, 0x1E, 0x33, 0x03, 0x33, 0x1E, 0x00], // 'c'
    [0x38, 0x30, 0x30, 0x3E, 0x33, 0x33, 0x6E, 0x00], // 'd'
    [0x00, 0x00, 0x1E, 0x33, 0x3F, 0x03, 0x1E, 0x00], // 'e'
    [0x1C, 0x36, 0x06, 0x0F, 0x06, 0x06, 0x0F, 0x00], // 'f'
    [0x00, 0x00, 0x6E, 0x33, 0x33, 0x3E, 0x30, 0x1F], // 'g'
    [0x07, 0x06, 0x36, 0x6E, 0x66, 0x66, 0x67, 0x00], // 'h'
    [0x0C, 0x00, 0x0E, 0x0C, 0x0C, 0x0C, 0x1E, 0x00], // 'i'
    [0x30, 0x00, 0x30, 0x30, 0x30, 0x33, 0x33, 0x1E], // 'j'
    [0x07, 0x06, 0x66, 0x36, 0x1E, 0x36, 0x67, 0x00], // 'k'
    [0x0E, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x1E, 0x00], // 'l'
    [0x00, 0x00, 0x33, 0x7F, 0x7F, 0x6B, 0x63, 0x00], // 'm'
    [0x00, 0x00, 0x1F, 0x33, 0x33, 0x33, 0x33, 0x00], // 'n'
    [0x00, 0x00, 0x1E, 0x33, 0x33, 0x33, 0x1E, 0x00], // 'o'
    [0x00, 0x00, 0x3B, 0x66, 0x66, 0x3E, 0x06, 0x0F], // 'p'
    [0x00, 0x00, 0x6E, 0x33, 0x33, 0x3E, 0x30, 0x78], // 'q'
    [0x00, 0x00, 0x3B, 0x6E, 0x66, 0x06, 0x0F, 0x00], // 'r'
    [0x00, 0x00, 0x3E, 0x03, 0x1E, 0x30, 0x1F, 0x00], // 's'
    [0x08, 0x0C, 0x3E, 0x0C, 0x0C, 0x2C, 0x18, 0x00], // 't'
    [0x00, 0x00, 0x33, 0x33, 0x33, 0x33, 0x6E, 0x00], // 'u'
    [0x00, 0x00, 0x33, 0x33, 0x33, 0x1E, 0x0C, 0x00], // 'v'
    [0x00, 0x00, 0x63, 0x6B, 0x7F, 0x7F, 0x36, 0x00], // 'w'
    [0x00, 0x00, 0x63, 0x36, 0x1C, 0x36, 0x63, 0x00], // 'x'
    [0x00, 0x00, 0x33, 0x33, 0x33, 0x3E, 0x30, 0x1F], // 'y'
    [0x00, 0x00, 0x3F, 0x19, 0x0C, 0x26, 0x3F, 0x00], // 'z'
    [0x38, 0x0C, 0x0C, 0x07, 0x0C, 0x0C, 0x38, 0x00], // '{'
    [0x18, 0x18, 0x18, 0x00, 0x18, 0x18, 0x18, 0x00], // '|'
    [0x07, 0x0C, 0x0C, 0x38, 0x0C, 0x0C, 0x07, 0x00], // '}'
    [0x6E, 0x3B, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00], // '~'
];

#[cfg(test)]
mod tests {
    use super::*;

    fn renderer() -> WordRenderer {
        WordRenderer::new(GlyphTable::embedded(), 24, 96)
    }

    #[test]
    fn renders_one_image_per_word() {
        let r = renderer();
        let seq = r.render_word_images("Hi there");
        assert_eq!(seq.images.dim(), (2, 24, 96));
        assert_eq!(seq.source_tokens, vec!["Hi", "there"]);
    }

    #[test]
    fn empty_text_renders_nothing() {
        let seq = renderer().render_word_images("");
        assert_eq!(seq.images.dim().0, 0);
        assert!(seq.source_tokens.is_empty());
    }

    #[test]
    fn punctuation_splits_like_the_pretokenizer() {
        let seq = renderer().render_word_images("a.");
        assert_eq!(seq.source_tokens, vec!["a", "."]);
        assert_eq!(seq.images.dim().0, 2);
    }

    #[test]
    fn distinct_words_render_distinct_images() {
        let r = renderer();
        let seq = r.render_word_images("cat dog cat");
        let a = seq.images.index_axis(ndarray::Axis(0), 0);
        let b = seq.images.index_axis(ndarray::Axis(0), 1);
        let c = seq.images.index_axis(ndarray::Axis(0), 2);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn embedded_visible_glyphs_are_pairwise_distinct() {
        for (i, a) in FONT_8X8_BASIC.iter().enumerate().skip(1) {
            for (j, b) in FONT_8X8_BASIC.iter().enumerate().skip(i + 1) {
                assert_ne!(a, b, "glyphs {:#x} and {:#x} collide", 0x20 + i, 0x20 + j);
            }
        }
    }

    #[test]
    fn missing_glyphs_use_fallback_and_count() {
        let r = renderer();
        assert_eq!(r.missing_glyph_count(), 0);
        let seq = r.render_word_images("日本");
        assert_eq!(seq.images.dim().0, 1);
        assert_eq!(r.missing_glyph_count(), 2);
        // Fallback block: the glyph cell is fully lit.
        let img = seq.images.index_axis(ndarray::Axis(0), 0);
        assert_eq!(img[[4, 0]], 255);
    }

    #[test]
    fn overlong_tokens_truncate_at_the_right_edge() {
        let r = renderer();
        let seq = r.render_word_images("abcdefghijklmnop");
        assert_eq!(seq.images.dim(), (1, 24, 96));
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = renderer();
        let a = r.render_word_images("same text");
        let b = r.render_word_images("same text");
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn json_glyph_table_overrides() {
        let dir = std::env::temp_dir().join("mmh-render-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("glyphs-{}.json", std::process::id()));
        // Codepoint 1488 = aleph, a custom vertical bar pattern.
        std::fs::write(&path, r#"{"1488": [24, 24, 24, 24, 24, 24, 24, 0]}"#).unwrap();
        let table = GlyphTable::from_json_file(&path).unwrap();
        assert!(table.get('\u{05D0}').is_some());
        let r = WordRenderer::new(table, 24, 96);
        r.render_word_images("\u{05D0}");
        assert_eq!(r.missing_glyph_count(), 0);
    }
}
