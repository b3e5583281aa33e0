//! Left-to-right column sweep from per-class candidates to a symbol sequence.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::CandidateTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Symbol,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// Set for symbols only.
    pub class: Option<usize>,
    pub score: f32,
    /// First and last owned pixel column, inclusive.
    pub x1: usize,
    pub x2: usize,
    /// Index of the source detection in [`CandidateTable::flatten`] order.
    #[serde(skip)]
    pub source: usize,
}

impl Token {
    pub fn width(&self) -> usize {
        self.x2 - self.x1 + 1
    }

    pub fn is_missing(&self) -> bool {
        self.kind == TokenKind::Missing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub tokens: Vec<Token>,
    pub tau: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<String>,
}

impl Transcription {
    /// Class per token, `None` for missing slots.
    pub fn symbols(&self) -> Vec<Option<usize>> {
        self.tokens.iter().map(|t| t.class).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_missing()).count()
    }

    pub fn symbol_count(&self) -> usize {
        self.tokens.len() - self.missing_count()
    }
}

/// Pixel columns `round(x1)..=round(x2)` of a box on a line `width` pixels
/// wide, or `None` when nothing of it lies on the line.
pub fn column_span(x1: f32, x2: f32, width: usize) -> Option<(usize, usize)> {
    if width == 0 {
        return None;
    }
    let lo = x1.round().max(0.0);
    let hi = x2.round().min((width - 1) as f32);
    (lo.is_finite() && hi.is_finite() && lo <= hi).then_some((lo as usize, hi as usize))
}

/// Column owner priority: higher score first, then smaller x1, class, id.
fn priority(a: &(usize, usize, f32, f32), b: &(usize, usize, f32, f32)) -> Ordering {
    b.2.total_cmp(&a.2)
        .then(a.3.total_cmp(&b.3))
        .then(a.1.cmp(&b.1))
        .then(a.0.cmp(&b.0))
}

/// Decodes one line.
///
/// Every column is owned by the highest-priority detection covering it.
/// Maximal runs of one owner are formed; each detection keeps only its widest
/// run (leftmost on ties); runs narrower than `interruption_px` are dropped.
/// Each remaining run yields a symbol when its score reaches `tau` and a
/// missing slot otherwise.
pub fn decode_line(table: &CandidateTable, tau: f32, interruption_px: usize) -> Transcription {
    let width = table.width;
    let flat = table.flatten();
    // (id, class, score, x1)
    let mut order: Vec<(usize, usize, f32, f32)> = flat
        .iter()
        .enumerate()
        .map(|(id, d)| (id, d.class_id, d.score, d.bbox.x1))
        .collect();
    order.sort_by(priority);

    // Paint columns from the strongest detection down; a column keeps the
    // first painter.
    let mut owner: Vec<Option<usize>> = vec![None; width];
    for &(id, ..) in &order {
        let d = &flat[id];
        if let Some((lo, hi)) = column_span(d.bbox.x1, d.bbox.x2, width) {
            for slot in &mut owner[lo..=hi] {
                slot.get_or_insert(id);
            }
        }
    }

    let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut x = 0;
    while x < width {
        let Some(id) = owner[x] else {
            x += 1;
            continue;
        };
        let start = x;
        while x < width && owner[x] == Some(id) {
            x += 1;
        }
        let run = (start, x - 1);
        best.entry(id)
            .and_modify(|r| {
                if run.1 - run.0 > r.1 - r.0 {
                    *r = run;
                }
            })
            .or_insert(run);
    }

    let mut tokens: Vec<Token> = best
        .into_iter()
        .filter(|(_, (lo, hi))| hi - lo + 1 >= interruption_px)
        .map(|(id, (x1, x2))| {
            let d = &flat[id];
            let symbol = d.score >= tau;
            Token {
                kind: if symbol { TokenKind::Symbol } else { TokenKind::Missing },
                class: symbol.then_some(d.class_id),
                score: d.score,
                x1,
                x2,
                source: id,
            }
        })
        .collect();
    tokens.sort_by_key(|t| t.x1);
    Transcription {
        tokens,
        tau,
        line: None,
    }
}

/// Space-separated class names with `?` for missing slots.
pub fn transcription_to_string(t: &Transcription, names: &BTreeMap<usize, String>) -> Result<String> {
    let parts = t
        .tokens
        .iter()
        .map(|tok| match tok.class {
            None => Ok("?"),
            Some(c) => names
                .get(&c)
                .map(String::as_str)
                .ok_or_else(|| Error::invalid(format!("class {c} has no name"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(" "))
}
