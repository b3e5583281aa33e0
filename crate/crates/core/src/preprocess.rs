//! Page binarization, line segmentation and support cropping.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::bitmap::{Bitmap, INK_THRESHOLD};
use crate::datagen::Glyph;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Dynamic range of the standard deviation in the Sauvola rule.
pub const SAUVOLA_R: f64 = 128.0;

/// Sauvola threshold for a window with the given pixel sum and sum of squares.
pub fn sauvola_threshold(sum: u64, sum_sq: u64, n: u64, k: f64) -> f64 {
    let n = n as f64;
    let mean = sum as f64 / n;
    let var = (sum_sq as f64 / n - mean * mean).max(0.0);
    mean * (1.0 + k * (var.sqrt() / SAUVOLA_R - 1.0))
}

/// Local adaptive binarization. The `window`×`window` neighborhood is clipped
/// at the page border; a pixel is ink when it is at or below its threshold.
pub fn binarize(page: &GrayImage, window: usize, k: f64) -> Result<Bitmap> {
    let (w, h) = (page.width() as usize, page.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid("binarize: empty image"));
    }
    if window == 0 || (window > w && window > h) {
        return Err(Error::invalid(format!(
            "binarize: window {window} does not fit a {w}x{h} page"
        )));
    }
    // Integral images with a zero top row and left column.
    let stride = w + 1;
    let mut sum = vec![0u64; stride * (h + 1)];
    let mut sq = vec![0u64; stride * (h + 1)];
    for y in 0..h {
        let (mut rs, mut rq) = (0u64, 0u64);
        for x in 0..w {
            let v = page.get_pixel(x as u32, y as u32)[0] as u64;
            rs += v;
            rq += v * v;
            sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
            sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
        }
    }
    let rect = |t: &[u64], x0: usize, y0: usize, x1: usize, y1: usize| {
        t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0]
    };
    let half = window / 2;
    let mut out = Bitmap::new(w, h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(half), (y + half + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(half), (x + half + 1).min(w));
            let n = ((x1 - x0) * (y1 - y0)) as u64;
            let t = sauvola_threshold(rect(&sum, x0, y0, x1, y1), rect(&sq, x0, y0, x1, y1), n, k);
            if page.get_pixel(x as u32, y as u32)[0] as f64 <= t {
                out.set(x, y, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Width of the moving average over the row profile.
    pub smooth_rows: usize,
    /// A row belongs to a line when its smoothed ink count exceeds this
    /// fraction of the page width.
    pub min_fraction: f64,
    pub pad: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            smooth_rows: 5,
            min_fraction: 0.02,
            pad: 4,
        }
    }
}

/// Smoothed horizontal projection. Rows outside the page count as blank, and
/// the profile covers every row the smoothing window can reach: entry `i`
/// belongs to page row `i + first`, where `first` is returned alongside.
pub fn projection_profile(page: &Bitmap, smooth_rows: usize) -> (isize, Vec<f64>) {
    let (w, h) = (page.width(), page.height() as isize);
    let raw: Vec<f64> = (0..h as usize)
        .map(|y| (0..w).filter(|&x| page.get(x, y) >= INK_THRESHOLD).count() as f64)
        .collect();
    let n = smooth_rows.max(1) as isize;
    let before = (n - 1) / 2;
    let after = n - 1 - before;
    let first = -after;
    let profile = (first..h + before)
        .map(|y| {
            let lo = (y - before).max(0);
            let hi = (y + after + 1).min(h);
            raw[lo as usize..hi.max(lo) as usize].iter().sum::<f64>() / n as f64
        })
        .collect();
    (first, profile)
}

/// Row ranges `[y0, y1)` of the detected lines, padded and possibly extending
/// past the page edges.
pub fn line_ranges(page: &Bitmap, cfg: &SegmentConfig) -> Vec<(isize, isize)> {
    let (first, profile) = projection_profile(page, cfg.smooth_rows);
    let limit = cfg.min_fraction * page.width() as f64;
    let pad = cfg.pad as isize;
    let mut ranges = Vec::new();
    let mut start = None;
    for (i, &v) in profile.iter().chain(std::iter::once(&0.0)).enumerate() {
        let y = i as isize + first;
        match (v > limit, start) {
            (true, None) => start = Some(y),
            (false, Some(s)) => {
                ranges.push((s - pad, y + pad));
                start = None;
            }
            _ => {}
        }
    }
    ranges
}

/// Cuts a binarized page into line images, top to bottom.
pub fn segment_lines(page: &Bitmap) -> Vec<Bitmap> {
    segment_lines_with(page, &SegmentConfig::default())
}

pub fn segment_lines_with(page: &Bitmap, cfg: &SegmentConfig) -> Vec<Bitmap> {
    line_ranges(page, cfg)
        .into_iter()
        .map(|(y0, y1)| page.crop(0, y0, page.width() as isize, y1))
        .collect()
}

/// Crops a support glyph out of a line image and trims it to its ink.
/// The pixel window is `floor(x1)..ceil(x2)` by `floor(y1)..ceil(y2)`.
pub fn crop_support(line: &Bitmap, b: &BBox, class_id: usize) -> Result<Glyph> {
    if !b.is_valid() || !b.within(line.width() as f32, line.height() as f32) {
        return Err(Error::invalid(format!(
            "crop_support: box {b:?} outside a {}x{} line",
            line.width(),
            line.height()
        )));
    }
    let crop = line.crop(
        b.x1.floor() as isize,
        b.y1.floor() as isize,
        b.x2.ceil() as isize,
        b.y2.ceil() as isize,
    );
    Glyph::new(&crop, class_id, 0, 0)
        .map_err(|_| Error::data(format!("crop_support: box {b:?} contains no ink")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;

    fn naive_binarize(page: &GrayImage, window: usize, k: f64) -> Vec<bool> {
        let (w, h) = (page.width() as i64, page.height() as i64);
        let half = (window / 2) as i64;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut q, mut n) = (0u64, 0u64, 0u64);
                for yy in (y - half).max(0)..(y + half + 1).min(h) {
                    for xx in (x - half).max(0)..(x + half + 1).min(w) {
                        let v = page.get_pixel(xx as u32, yy as u32)[0] as u64;
                        s += v;
                        q += v * v;
                        n += 1;
                    }
                }
                let mean = s as f64 / n as f64;
                let sd = (q as f64 / n as f64 - mean * mean).max(0.0).sqrt();
                let t = mean * (1.0 + k * (sd / 128.0 - 1.0));
                out.push(page.get_pixel(x as u32, y as u32)[0] as f64 <= t);
            }
        }
        out
    }

    fn gradient_with_stroke() -> GrayImage {
        GrayImage::from_fn(120, 60, |x, y| {
            let bg = 140 + (x * 100 / 120) as u8;
            if (28..33).contains(&y) && (20..100).contains(&x) {
                Luma([bg / 4])
            } else {
                Luma([bg])
            }
        })
    }

    #[test]
    fn uniform_pages() {
        let white = GrayImage::from_pixel(40, 30, Luma([255]));
        assert_eq!(binarize(&white, 31, 0.2).unwrap().ink_count(), 0);
        let black = GrayImage::from_pixel(40, 30, Luma([0]));
        assert_eq!(binarize(&black, 31, 0.2).unwrap().ink_count(), 40 * 30);
    }

    #[test]
    fn window_must_fit() {
        let img = GrayImage::from_pixel(20, 10, Luma([255]));
        assert!(binarize(&img, 31, 0.2).is_err());
        assert!(binarize(&img, 15, 0.2).is_ok());
    }

    #[test]
    fn stroke_on_gradient_matches_oracle() {
        let page = gradient_with_stroke();
        let fast = binarize(&page, 31, 0.2).unwrap();
        let slow = naive_binarize(&page, 31, 0.2);
        let agree = fast
            .data()
            .iter()
            .zip(&slow)
            .filter(|(a, b)| (**a >= 0.5) == **b)
            .count();
        assert_eq!(agree, slow.len());
        for x in 20..100 {
            assert_eq!(fast.get(x, 30), 1.0, "stroke pixel {x}");
        }
        assert_eq!(fast.get(5, 5), 0.0);
    }

    #[test]
    fn blank_page_has_no_lines() {
        assert!(segment_lines(&Bitmap::new(50, 40)).is_empty());
    }

    #[test]
    fn two_bands() {
        let mut page = Bitmap::new(100, 80);
        for y in (10..20).chain(50..58) {
            for x in 10..90 {
                page.set(x, y, 1.0);
            }
        }
        // The 5-row average crosses 2 (2% of 100) two rows before a band and
        // stays above it until two rows after.
        assert_eq!(line_ranges(&page, &SegmentConfig::default()), vec![(4, 26), (44, 64)]);
        let lines = segment_lines(&page);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].height(), 22);
    }

    #[test]
    fn stacked_lines_are_recovered() {
        let mut rng = crate::datagen::child_rng(4, 0);
        let atlas = crate::datagen::SynthAtlasConfig {
            alphabets: 2,
            samples_per_class: 4,
            ..Default::default()
        }
        .build(0, &crate::datagen::SplitSpec::AllTrain)
        .unwrap();
        let cfg = crate::datagen::CorpusConfig::default();
        let lines: Vec<_> = (0..4)
            .map(|_| crate::datagen::generate_line(&atlas, &cfg, &mut rng).unwrap())
            .collect();
        let w = lines.iter().map(|l| l.image.width()).max().unwrap();
        let mut page = Bitmap::new(w, 4 * 84 + 20);
        for (i, l) in lines.iter().enumerate() {
            page.paste_max(&l.image, 0, (20 + i * 84) as isize);
        }
        assert_eq!(segment_lines(&page).len(), 4);
    }

    #[test]
    fn crop_errors() {
        let mut line = Bitmap::new(40, 20);
        line.set(5, 5, 1.0);
        assert!(crop_support(&line, &BBox::new(10.0, 0.0, 50.0, 20.0), 0).is_err());
        assert!(matches!(
            crop_support(&line, &BBox::new(20.0, 0.0, 30.0, 20.0), 0),
            Err(Error::Data(_))
        ));
        let g = crop_support(&line, &BBox::new(0.0, 0.0, 40.0, 20.0), 3).unwrap();
        assert_eq!((g.width(), g.height(), g.class_id), (1, 1, 3));
    }

    proptest! {
        #[test]
        fn padding_rows_does_not_move_lines(bands in proptest::collection::vec((0usize..60, 1usize..12), 1..4), top in 0usize..30, bottom in 0usize..30) {
            let mut page = Bitmap::new(60, 80);
            for &(y, hgt) in &bands {
                for yy in y..(y + hgt).min(80) {
                    for x in 5..55 {
                        page.set(x, yy, 1.0);
                    }
                }
            }
            let padded = page.crop(0, -(top as isize), 60, 80 + bottom as isize);
            prop_assert_eq!(segment_lines(&page), segment_lines(&padded));
        }

        #[test]
        fn crop_of_trimmed_is_identity(pixels in proptest::collection::vec((0usize..30, 0usize..20), 1..40)) {
            let mut img = Bitmap::new(30, 20);
            for &(x, y) in &pixels {
                img.set(x, y, 1.0);
            }
            let trimmed = img.trim().unwrap();
            let full = BBox::new(0.0, 0.0, trimmed.width() as f32, trimmed.height() as f32);
            let g = crop_support(&trimmed, &full, 0).unwrap();
            prop_assert_eq!(g.image, trimmed);
        }
    }
}
