use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::Glyph;

pub const MIN_SYMBOLS: usize = 5;
pub const MAX_SYMBOLS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposeConfig {
    pub line_height: usize,
    pub max_glyph_height: usize,
    /// Horizontal gap between consecutive glyphs is uniform in
    /// `[gap_min, gap_max]`; negative gaps overlap.
    pub gap_min: i32,
    pub gap_max: i32,
    /// Vertical offset from the centered position, uniform in `[-jitter, jitter]`.
    pub jitter: i32,
    pub margin: usize,
    /// Line length range used by callers that draw a random symbol count.
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Paste clipped fragments of other glyphs at the top and bottom edges,
    /// emulating strokes from neighbouring lines. Not part of the ground truth.
    pub vertical_intrusions: bool,
    pub intrusion_rate: f32,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        ComposeConfig {
            line_height: 64,
            max_glyph_height: 56,
            gap_min: -8,
            gap_max: 12,
            jitter: 6,
            margin: 8,
            min_symbols: MIN_SYMBOLS,
            max_symbols: MAX_SYMBOLS,
            vertical_intrusions: false,
            intrusion_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A line image with its ground-truth boxes in placement order.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSample {
    pub image: Bitmap,
    pub gt: Vec<GtBox>,
}

impl LineSample {
    pub fn labels(&self) -> Vec<usize> {
        self.gt.iter().map(|g| g.class_id).collect()
    }

    pub fn boxes_of(&self, class_id: usize) -> Vec<BBox> {
        self.gt
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| g.bbox)
            .collect()
    }
}

/// Shrinks glyphs taller than the limit; the result stays trimmed.
pub(crate) fn fit_height(g: &Glyph, max_h: usize) -> Glyph {
    if g.height() <= max_h {
        return g.clone();
    }
    let f = max_h as f32 / g.height() as f32;
    let w = ((g.width() as f32 * f).round() as usize).max(1);
    let scaled = g.image.resize(w, max_h);
    match scaled.trim() {
        Some(t) => g.with_image(t),
        None => g.with_image(scaled),
    }
}

/// Places glyphs left to right. For glyph `i > 0` a gap is drawn first, then
/// the vertical jitter; glyph 0 draws only its jitter. Ink is composited by
/// per-pixel max.
pub fn compose_line<R: Rng>(glyphs: &[Glyph], rng: &mut R, cfg: &ComposeConfig) -> Result<LineSample> {
    if !(MIN_SYMBOLS..=MAX_SYMBOLS).contains(&glyphs.len()) {
        return Err(Error::invalid(format!(
            "a line holds {MIN_SYMBOLS}..={MAX_SYMBOLS} symbols, got {}",
            glyphs.len()
        )));
    }
    if cfg.max_glyph_height > cfg.line_height || cfg.gap_min > cfg.gap_max || cfg.jitter < 0 {
        return Err(Error::invalid(format!("inconsistent compose config {cfg:?}")));
    }
    let fitted: Vec<Glyph> = glyphs
        .iter()
        .map(|g| fit_height(g, cfg.max_glyph_height))
        .collect();

    let h = cfg.line_height as i64;
    let mut placements: Vec<(i64, i64)> = Vec::with_capacity(fitted.len());
    let mut prev: Option<(i64, i64)> = None; // (x, width)
    for g in &fitted {
        let x = match prev {
            None => cfg.margin as i64,
            Some((px, pw)) => {
                let gap = rng.gen_range(cfg.gap_min..=cfg.gap_max) as i64;
                (px + pw + gap).max(px + 1)
            }
        };
        let jitter = rng.gen_range(-cfg.jitter..=cfg.jitter) as i64;
        let gh = g.height() as i64;
        let top = ((h - gh) / 2 + jitter).clamp(0, h - gh);
        placements.push((x, top));
        prev = Some((x, g.width() as i64));
    }

    let right = fitted
        .iter()
        .zip(&placements)
        .map(|(g, &(x, _))| x + g.width() as i64)
        .max()
        .unwrap();
    let width = (right + cfg.margin as i64) as usize;
    let mut image = Bitmap::new(width, cfg.line_height);
    let mut gt = Vec::with_capacity(fitted.len());
    for (g, &(x, top)) in fitted.iter().zip(&placements) {
        image.paste_max(&g.image, x as isize, top as isize);
        gt.push(GtBox {
            bbox: BBox::new(
                x as f32,
                top as f32,
                (x + g.width() as i64) as f32,
                (top + g.height() as i64) as f32,
            ),
            class_id: g.class_id,
        });
    }

    if cfg.vertical_intrusions {
        add_intrusions(&mut image, &fitted, rng, cfg);
    }
    Ok(LineSample { image, gt })
}

fn add_intrusions<R: Rng>(image: &mut Bitmap, glyphs: &[Glyph], rng: &mut R, cfg: &ComposeConfig) {
    let count = (glyphs.len() as f32 * cfg.intrusion_rate).round() as usize;
    for _ in 0..count {
        let g = &glyphs[rng.gen_range(0..glyphs.len())];
        let depth = rng.gen_range(3..=10).min(g.height()) as isize;
        let x = rng.gen_range(0..image.width()) as isize - g.width() as isize / 2;
        let y = if rng.gen_bool(0.5) {
            depth - g.height() as isize
        } else {
            image.height() as isize - depth
        };
        image.paste_max(&g.image, x, y);
    }
}
