//! Per-class candidate tables for a query line.

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::datagen::Glyph;
use crate::detector::{rescale_detections, Detector};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::numerics::Real;

/// Support crops of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportClass {
    pub class_id: usize,
    pub shots: Vec<Glyph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCandidates {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub detections: Vec<Detection>,
}

/// Detections of every support class on one line, before any confidence
/// threshold is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub width: usize,
    pub classes: Vec<ClassCandidates>,
}

impl CandidateTable {
    /// Sorts each class list by x1 (then by descending score).
    pub fn new(width: usize, mut classes: Vec<ClassCandidates>) -> CandidateTable {
        for c in &mut classes {
            c.detections
                .sort_by(|a, b| a.bbox.x1.total_cmp(&b.bbox.x1).then(b.score.total_cmp(&a.score)));
        }
        CandidateTable { width, classes }
    }

    /// All detections in class order; indices into this list identify
    /// detections in decoded tokens.
    pub fn flatten(&self) -> Vec<Detection> {
        self.classes.iter().flat_map(|c| c.detections.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.detections.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A table paired with the confidence threshold deciding which detections may
/// be emitted as symbols. Nothing is removed: weaker detections still mark
/// missing slots during decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedTable<'a> {
    pub table: &'a CandidateTable,
    pub tau: f32,
}

impl GatedTable<'_> {
    pub fn is_eligible(&self, d: &Detection) -> bool {
        d.score >= self.tau
    }

    pub fn eligible_count(&self) -> usize {
        self.table.flatten().iter().filter(|d| self.is_eligible(d)).count()
    }
}

pub fn filter_confidence(table: &CandidateTable, tau: f32) -> Result<GatedTable<'_>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("confidence threshold {tau} outside [0, 1]")));
    }
    Ok(GatedTable { table, tau })
}

/// Runs the detector once per support class over a shared query feature map
/// and collects every detection scoring at least the model's score floor.
pub fn detect_alphabet<T: Real>(det: &Detector<T>, line: &Bitmap, supports: &[SupportClass]) -> Result<CandidateTable> {
    if supports.is_empty() {
        return Err(Error::invalid("detect_alphabet needs at least one support class"));
    }
    if let Some(s) = supports.iter().find(|s| s.shots.is_empty()) {
        return Err(Error::invalid(format!("support class {} has no shots", s.class_id)));
    }
    let (input, back) = det.line_input(line)?;
    let feat = det.extract_features(&input)?;
    let classes = supports
        .iter()
        .map(|s| {
            let dets = det.detect_with_query(&feat, input.width(), input.height(), &s.shots, s.class_id)?;
            let kept = dets
                .into_iter()
                .filter(|d| d.score >= det.config.score_floor)
                .collect();
            Ok(ClassCandidates {
                class_id: s.class_id,
                detections: rescale_detections(kept, back, line.width(), line.height()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateTable::new(line.width(), classes))
}
