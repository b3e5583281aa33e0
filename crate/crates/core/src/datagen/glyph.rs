use crate::bitmap::Bitmap;
use crate::error::{Error, Result};

/// One handwritten symbol sample, trimmed to its ink bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Glyph {
    pub image: Bitmap,
    pub class_id: usize,
    pub alphabet_id: usize,
    pub sample_index: usize,
}

impl Glyph {
    pub fn new(image: &Bitmap, class_id: usize, alphabet_id: usize, sample_index: usize) -> Result<Glyph> {
        let image = image
            .trim()
            .ok_or_else(|| Error::data(format!("glyph of class {class_id} has no ink")))?;
        Ok(Glyph {
            image,
            class_id,
            alphabet_id,
            sample_index,
        })
    }

    pub fn with_image(&self, image: Bitmap) -> Glyph {
        Glyph {
            image,
            ..self.clone()
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}
