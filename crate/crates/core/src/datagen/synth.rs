//! Procedural stroke glyphs standing in for a handwritten symbol corpus.
//!
//! A class is a [`Prototype`]: a few quadratic curves, arcs and dots in the
//! unit square. Every sample re-renders the prototype with jittered control
//! points and a random pen width, which gives Omniglot-like intra-class
//! variation.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};

use super::{child_rng, Atlas, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphStyle {
    /// Square canvas side in pixels.
    pub size: usize,
    pub min_thickness: f32,
    pub max_thickness: f32,
    /// Per-sample control point jitter, in unit-square coordinates.
    pub jitter: f32,
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub arc_prob: f32,
    pub dot_prob: f32,
}

impl Default for GlyphStyle {
    fn default() -> Self {
        GlyphStyle {
            size: 48,
            min_thickness: 2.0,
            max_thickness: 3.2,
            jitter: 0.05,
            min_strokes: 1,
            max_strokes: 4,
            arc_prob: 0.3,
            dot_prob: 0.1,
        }
    }
}

impl GlyphStyle {
    /// Heavier pen, rounder shapes: a visibly different "manuscript" hand.
    pub fn cipher() -> Self {
        GlyphStyle {
            size: 44,
            min_thickness: 3.6,
            max_thickness: 5.0,
            jitter: 0.07,
            min_strokes: 2,
            max_strokes: 4,
            arc_prob: 0.55,
            dot_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stroke {
    Curve([(f32, f32); 3]),
    Arc {
        center: (f32, f32),
        radius: (f32, f32),
        start: f32,
        sweep: f32,
    },
    Dot((f32, f32)),
}

/// Prototypes are rescaled so their longer side spans this much of the unit
/// square and their shorter side at least `MIN_MINOR` of it.
const FILL: f32 = 0.8;
const MIN_MINOR: f32 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    strokes: Vec<Stroke>,
}

fn point<R: Rng>(rng: &mut R) -> (f32, f32) {
    (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9))
}

fn jitter<R: Rng>(p: (f32, f32), amount: f32, rng: &mut R) -> (f32, f32) {
    if amount <= 0.0 {
        return p;
    }
    (
        (p.0 + rng.gen_range(-amount..amount)).clamp(0.0, 1.0),
        (p.1 + rng.gen_range(-amount..amount)).clamp(0.0, 1.0),
    )
}

impl Stroke {
    fn polyline(&self) -> Vec<(f32, f32)> {
        const STEPS: usize = 20;
        match *self {
            Stroke::Curve([a, b, c]) => (0..=STEPS)
                .map(|i| {
                    let t = i as f32 / STEPS as f32;
                    let u = 1.0 - t;
                    (
                        u * u * a.0 + 2.0 * u * t * b.0 + t * t * c.0,
                        u * u * a.1 + 2.0 * u * t * b.1 + t * t * c.1,
                    )
                })
                .collect(),
            Stroke::Arc {
                center,
                radius,
                start,
                sweep,
            } => (0..=STEPS)
                .map(|i| {
                    let a = start + sweep * i as f32 / STEPS as f32;
                    (center.0 + radius.0 * a.cos(), center.1 + radius.1 * a.sin())
                })
                .collect(),
            Stroke::Dot(p) => vec![p],
        }
    }

    fn endpoint(&self) -> (f32, f32) {
        *self.polyline().last().unwrap()
    }

    fn map(&self, f: impl Fn((f32, f32)) -> (f32, f32), sx: f32, sy: f32) -> Stroke {
        match *self {
            Stroke::Curve(pts) => Stroke::Curve(pts.map(&f)),
            Stroke::Arc {
                center,
                radius,
                start,
                sweep,
            } => Stroke::Arc {
                center: f(center),
                radius: (radius.0 * sx, radius.1 * sy),
                start,
                sweep,
            },
            Stroke::Dot(p) => Stroke::Dot(f(p)),
        }
    }
}

impl Prototype {
    pub fn random<R: Rng>(rng: &mut R, style: &GlyphStyle) -> Prototype {
        let count = rng.gen_range(style.min_strokes..=style.max_strokes.max(style.min_strokes));
        let mut strokes: Vec<Stroke> = Vec::with_capacity(count);
        for i in 0..count {
            // Later strokes often start where an earlier one ended.
            let start = if i > 0 && rng.gen_bool(0.6) {
                strokes[rng.gen_range(0..i)].endpoint()
            } else {
                point(rng)
            };
            let roll: f32 = rng.gen();
            let stroke = if i > 0 && roll < style.dot_prob {
                Stroke::Dot(point(rng))
            } else if roll < style.dot_prob + style.arc_prob {
                let radius = rng.gen_range(0.15..0.35);
                Stroke::Arc {
                    center: (
                        start.0.clamp(0.1 + radius, 0.9 - radius),
                        start.1.clamp(0.1 + radius, 0.9 - radius),
                    ),
                    radius: (radius, radius),
                    start: rng.gen_range(0.0..2.0 * PI),
                    sweep: rng.gen_range(0.8 * PI..2.0 * PI),
                }
            } else {
                Stroke::Curve([start, point(rng), point(rng)])
            };
            strokes.push(stroke);
        }
        Prototype { strokes }.normalized()
    }

    /// Centers the prototype and rescales it to fill the unit square.
    fn normalized(self) -> Prototype {
        let pts: Vec<(f32, f32)> = self.strokes.iter().flat_map(|s| s.polyline()).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        for &(x, y) in &pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let major = w.max(h);
        if major < 1e-3 {
            return self;
        }
        let base = FILL / major;
        // Stretch a thin minor axis, unless the shape is a straight bar.
        let stretch = |e: f32| if e > 1e-3 && e * base < MIN_MINOR { MIN_MINOR / e } else { base };
        let (sx, sy) = (stretch(w), stretch(h));
        let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let f = |p: (f32, f32)| (0.5 + (p.0 - cx) * sx, 0.5 + (p.1 - cy) * sy);
        Prototype {
            strokes: self.strokes.iter().map(|s| s.map(f, sx, sy)).collect(),
        }
    }

    fn perturbed<R: Rng>(&self, amount: f32, rng: &mut R) -> Prototype {
        let strokes = self
            .strokes
            .iter()
            .map(|s| match *s {
                Stroke::Curve(pts) => Stroke::Curve(pts.map(|p| jitter(p, amount, rng))),
                Stroke::Arc {
                    center,
                    radius,
                    start,
                    sweep,
                } => Stroke::Arc {
                    center: jitter(center, amount, rng),
                    radius: {
                        let k = 1.0 + rng.gen_range(-amount..=amount);
                        (radius.0 * k, radius.1 * k)
                    },
                    start: start + rng.gen_range(-amount..=amount) * PI,
                    sweep,
                },
                Stroke::Dot(p) => Stroke::Dot(jitter(p, amount, rng)),
            })
            .collect();
        Prototype { strokes }
    }

    /// Renders one sample with fresh jitter and pen width.
    pub fn render<R: Rng>(&self, rng: &mut R, style: &GlyphStyle) -> Bitmap {
        let proto = self.perturbed(style.jitter, rng);
        let thickness = rng.gen_range(style.min_thickness..=style.max_thickness);
        let size = style.size;
        let span = size as f32 * 0.85;
        let offset = size as f32 * 0.075;
        let to_px = |p: (f32, f32)| (offset + p.0 * span, offset + p.1 * span);
        let mut segments: Vec<((f32, f32), (f32, f32), f32)> = Vec::new();
        for s in &proto.strokes {
            let pts: Vec<(f32, f32)> = s.polyline().into_iter().map(to_px).collect();
            match s {
                Stroke::Dot(_) => segments.push((pts[0], pts[0], thickness * 0.9)),
                _ => {
                    for w in pts.windows(2) {
                        segments.push((w[0], w[1], thickness / 2.0));
                    }
                }
            }
        }
        let mut img = Bitmap::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let p = (x as f32 + 0.5, y as f32 + 0.5);
                if segments
                    .iter()
                    .any(|&(a, b, r)| segment_distance(p, a, b) <= r)
                {
                    img.set(x, y, 1.0);
                }
            }
        }
        img
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthAtlasConfig {
    pub alphabets: usize,
    pub classes_per_alphabet: usize,
    pub samples_per_class: usize,
    pub style: GlyphStyle,
    /// Prefix of alphabet directory names.
    pub prefix: String,
}

impl Default for SynthAtlasConfig {
    fn default() -> Self {
        SynthAtlasConfig {
            alphabets: 40,
            classes_per_alphabet: 1,
            samples_per_class: 20,
            style: GlyphStyle::default(),
            prefix: "alphabet".into(),
        }
    }
}

type ClassSamples = (String, Vec<Bitmap>);

impl SynthAtlasConfig {
    /// `(alphabet name, [(class name, samples)])`, a pure function of the seed.
    pub fn render(&self, seed: u64) -> Vec<(String, Vec<ClassSamples>)> {
        (0..self.alphabets)
            .map(|a| {
                let classes = (0..self.classes_per_alphabet)
                    .map(|c| {
                        let class_index = (a * self.classes_per_alphabet + c) as u64;
                        let mut rng = child_rng(seed, class_index);
                        let proto = Prototype::random(&mut rng, &self.style);
                        let samples = (0..self.samples_per_class)
                            .map(|_| proto.render(&mut rng, &self.style))
                            .collect();
                        (format!("character{:02}", c + 1), samples)
                    })
                    .collect();
                (format!("{}_{:02}", self.prefix, a + 1), classes)
            })
            .collect()
    }

    /// In-memory atlas with the last `test_alphabets` alphabets held out.
    pub fn build(&self, seed: u64, split: &SplitSpec) -> Result<Atlas> {
        let rendered = self.render(seed);
        let n = rendered.len();
        let test_names: Vec<String> = match split {
            SplitSpec::AllTrain => Vec::new(),
            SplitSpec::LastAlphabets(k) => rendered[n.saturating_sub(*k)..]
                .iter()
                .map(|(name, _)| name.clone())
                .collect(),
            SplitSpec::Named(names) => names.clone(),
        };
        Atlas::from_samples(
            rendered
                .into_iter()
                .map(|(name, classes)| {
                    let split = if test_names.contains(&name) {
                        super::Split::Test
                    } else {
                        super::Split::Train
                    };
                    (name, split, classes)
                })
                .collect(),
        )
    }
}

/// Writes a synthetic atlas as `root/alphabet/character/sample.png`.
pub fn write_synthetic_atlas(root: &Path, cfg: &SynthAtlasConfig, seed: u64) -> Result<()> {
    for (alphabet, classes) in cfg.render(seed) {
        for (class, samples) in classes {
            let dir = root.join(&alphabet).join(&class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in samples.iter().enumerate() {
                img.save(&dir.join(format!("sample{:02}.png", i + 1)))?;
            }
        }
    }
    Ok(())
}
