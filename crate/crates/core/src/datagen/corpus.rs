use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::{child_rng, compose_line, transform_glyph, Atlas, ComposeConfig, GtBox, LineSample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub compose: ComposeConfig,
    /// Each line draws its symbols from this many distinct classes.
    pub classes_per_line: usize,
    pub split: Split,
    pub transform: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            compose: ComposeConfig::default(),
            classes_per_line: 5,
            split: Split::Train,
            transform: true,
        }
    }
}

/// One record of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub boxes: Vec<[f32; 4]>,
    pub labels: Vec<usize>,
}

impl Annotation {
    pub fn from_line(image: String, line: &LineSample) -> Annotation {
        Annotation {
            image,
            boxes: line
                .gt
                .iter()
                .map(|g| [g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2])
                .collect(),
            labels: line.labels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub n_lines: usize,
    pub split: String,
}

/// Draws one line from the query pools of `cfg.split`.
pub fn generate_line<R: Rng>(atlas: &Atlas, cfg: &CorpusConfig, rng: &mut R) -> Result<LineSample> {
    let classes = atlas.class_ids(cfg.split);
    if classes.is_empty() {
        return Err(Error::data(format!("atlas has no {} classes", cfg.split)));
    }
    let k = cfg.classes_per_line.clamp(1, classes.len());
    let chosen: Vec<usize> = classes.choose_multiple(rng, k).copied().collect();
    let n = rng.gen_range(cfg.compose.min_symbols..=cfg.compose.max_symbols);
    let glyphs: Vec<_> = (0..n)
        .map(|_| {
            let class = atlas.class(chosen[rng.gen_range(0..k)]);
            let pool = class.query_samples();
            let g = &pool[rng.gen_range(0..pool.len())];
            if cfg.transform {
                transform_glyph(g, rng)
            } else {
                g.clone()
            }
        })
        .collect();
    compose_line(&glyphs, rng, &cfg.compose)
}

/// Writes `n_lines` generated lines plus `annotations.jsonl` and
/// `manifest.json` under `out`. Line `i` uses its own child seed.
pub fn generate_corpus(atlas: &Atlas, n_lines: usize, seed: u64, cfg: &CorpusConfig, out: &Path) -> Result<Manifest> {
    let lines = (0..n_lines)
        .map(|i| generate_line(atlas, cfg, &mut child_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        config_hash: crate::config_hash(cfg),
        n_lines,
        split: cfg.split.to_string(),
    };
    write_lines(out, &lines, &manifest)?;
    Ok(manifest)
}

pub fn write_lines(out: &Path, lines: &[LineSample], manifest: &Manifest) -> Result<()> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let rel = format!("images/line_{i:05}.png");
        line.image.save(&out.join(&rel))?;
        let mut rec = serde_json::to_vec(&Annotation::from_line(rel, line))?;
        rec.push(b'\n');
        records.extend(rec);
    }
    let ann = out.join("annotations.jsonl");
    fs::write(&ann, records).map_err(|e| Error::io(&ann, e))?;
    let path = out.join("manifest.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a directory written by [`write_lines`] (or any directory with an
/// `annotations.jsonl` in the same format).
pub fn read_corpus(dir: &Path) -> Result<Vec<LineSample>> {
    let path = dir.join("annotations.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = Vec::new();
    for (n, row) in BufReader::new(f).lines().enumerate() {
        let row = row.map_err(|e| Error::io(&path, e))?;
        if row.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&row)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if ann.boxes.len() != ann.labels.len() {
            return Err(Error::data(format!(
                "{}:{}: {} boxes but {} labels",
                path.display(),
                n + 1,
                ann.boxes.len(),
                ann.labels.len()
            )));
        }
        let image = Bitmap::load(&dir.join(&ann.image))?;
        let gt = ann
            .boxes
            .iter()
            .zip(&ann.labels)
            .map(|(b, &class_id)| GtBox {
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
                class_id,
            })
            .collect();
        lines.push(LineSample { image, gt });
    }
    Ok(lines)
}
