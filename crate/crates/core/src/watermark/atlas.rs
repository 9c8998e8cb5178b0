use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::io::image::decode_png;
use crate::tensor::Tensor;

macro_rules! glyphs {
    ($($c:literal),* $(,)?) => {
        &[$(($c, include_bytes!(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/glyphs/", $c, ".png")))),*]
    };
}

static BUNDLED: &[(&str, &[u8])] = glyphs![
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "A", "B", "C", "D", "E", "F", "G", "H", "I", "J",
    "K", "L", "M", "N", "O", "P", "Q", "R", "S", "T", "U", "V", "W", "X", "Y", "Z",
];

/// Square grayscale bitmaps for the digits and uppercase letters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphAtlas {
    size: usize,
    glyphs: Vec<(char, Tensor<f32>)>,
}

impl GlyphAtlas {
    /// The embedded 16×16 atlas.
    pub fn bundled() -> &'static GlyphAtlas {
        static ATLAS: OnceLock<GlyphAtlas> = OnceLock::new();
        ATLAS.get_or_init(|| {
            let glyphs = BUNDLED
                .iter()
                .map(|(name, bytes)| {
                    let c = name.chars().next().unwrap();
                    let t = decode_png(bytes, std::path::Path::new(name)).expect("bundled glyph decodes");
                    (c, t)
                })
                .collect();
            GlyphAtlas::new(glyphs).expect("bundled atlas is valid")
        })
    }

    pub fn new(glyphs: Vec<(char, Tensor<f32>)>) -> Result<Self> {
        let size = glyphs
            .first()
            .map(|(_, t)| t.shape()[0])
            .ok_or_else(|| Error::invalid("empty glyph atlas"))?;
        for (c, t) in &glyphs {
            if t.shape() != [size, size] {
                return Err(Error::invalid(format!("glyph {c:?} is not {size}x{size}")));
            }
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) || !t.data().iter().any(|v| *v > 0.5) {
                return Err(Error::invalid(format!("glyph {c:?} must lie in [0,1] with some ink above 0.5")));
            }
        }
        Ok(Self { size, glyphs })
    }

    pub fn glyph_size(&self) -> usize {
        self.size
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.iter().map(|(c, _)| *c)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        let c = c.to_ascii_uppercase();
        self.glyphs
            .iter()
            .position(|(g, _)| *g == c)
            .ok_or_else(|| Error::invalid(format!("no glyph {c:?} in the atlas")))
    }

    pub fn get(&self, c: char) -> Result<&Tensor<f32>> {
        Ok(&self.glyphs[self.index_of(c)?].1)
    }

    pub fn by_index(&self, i: usize) -> &Tensor<f32> {
        &self.glyphs[i].1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_atlas_is_complete_and_valid() {
        let atlas = GlyphAtlas::bundled();
        assert_eq!(atlas.len(), 36);
        assert_eq!(atlas.glyph_size(), 16);
        assert_eq!(atlas.chars().collect::<String>(), "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ");
        assert!(atlas.get('q').is_ok());
        assert!(atlas.get('?').is_err());
    }
}
