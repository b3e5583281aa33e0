use rand::Rng;

use crate::error::{Error, Result};

use super::Glyph;

pub const SCALE_RANGE: (f32, f32) = (0.7, 1.3);
pub const ROTATION_RANGE: (f32, f32) = (-15.0, 15.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Morph {
    Dilate,
    Erode,
}

/// A concrete draw of the random glyph transforms; `None` skips that step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlyphTransform {
    pub scale: Option<f32>,
    pub rotation_deg: Option<f32>,
    pub morph: Option<Morph>,
}

impl GlyphTransform {
    /// Each step is enabled independently with probability 0.5.
    pub fn sample<R: Rng>(rng: &mut R) -> GlyphTransform {
        let scale = rng
            .gen_bool(0.5)
            .then(|| rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1));
        let rotation_deg = rng
            .gen_bool(0.5)
            .then(|| rng.gen_range(ROTATION_RANGE.0..=ROTATION_RANGE.1));
        let morph = rng
            .gen_bool(0.5)
            .then(|| if rng.gen_bool(0.5) { Morph::Dilate } else { Morph::Erode });
        GlyphTransform {
            scale,
            rotation_deg,
            morph,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
                return Err(Error::invalid(format!("glyph scale {s} outside {SCALE_RANGE:?}")));
            }
        }
        if let Some(r) = self.rotation_deg {
            if !(ROTATION_RANGE.0..=ROTATION_RANGE.1).contains(&r) {
                return Err(Error::invalid(format!("glyph rotation {r} outside {ROTATION_RANGE:?}")));
            }
        }
        Ok(())
    }

    /// Resize, then rotate, then dilate or erode; the result is re-trimmed.
    /// Erosion is skipped when it would leave no ink.
    pub fn apply(&self, g: &Glyph) -> Result<Glyph> {
        self.validate()?;
        if *self == GlyphTransform::default() {
            return Ok(g.clone());
        }
        let mut img = g.image.clone();
        if let Some(s) = self.scale {
            img = img.scale(s);
        }
        if let Some(r) = self.rotation_deg {
            img = img.rotate(r);
        }
        match self.morph {
            Some(Morph::Dilate) => img = img.dilate(),
            Some(Morph::Erode) => {
                let eroded = img.erode();
                if eroded.ink_count() > 0 {
                    img = eroded;
                }
            }
            None => {}
        }
        match img.trim() {
            Some(t) => Ok(g.with_image(t)),
            // Resampling a tiny glyph can wash out all ink; keep the original.
            None => Ok(g.clone()),
        }
    }
}

pub fn transform_glyph<R: Rng>(g: &Glyph, rng: &mut R) -> Glyph {
    GlyphTransform::sample(rng)
        .apply(g)
        .expect("sampled transforms are in range")
}
