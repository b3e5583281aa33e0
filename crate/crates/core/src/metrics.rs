//! Symbol error rate, missing rate, detection recall and threshold sweeps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{GtBox, LineSample};
use crate::detector::Detector;
use crate::decoder::{decode_line, Transcription};
use crate::error::{Error, Result};
use crate::geometry::{detection_order, iou};
use crate::inference::{detect_alphabet, CandidateTable, SupportClass};
use crate::numerics::Real;

/// Edit-distance breakdown of one prediction against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SerCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl SerCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    pub fn ser(&self) -> f64 {
        self.errors() as f64 / self.n as f64
    }

    pub fn add(&mut self, other: &SerCounts) {
        self.s += other.s;
        self.d += other.d;
        self.i += other.i;
        self.n += other.n;
    }
}

/// Levenshtein alignment with unit costs where a `None` prediction (a missing
/// slot) matches any single ground-truth symbol for free.
pub fn ser_symbols(gt: &[usize], pred: &[Option<usize>]) -> Result<SerCounts> {
    if gt.is_empty() {
        return Err(Error::invalid("ser: empty ground truth"));
    }
    let (n, m) = (gt.len(), pred.len());
    let sub = |i: usize, j: usize| usize::from(pred[j].is_some_and(|p| p != gt[i]));
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in dist[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            dist[i][j] = (dist[i - 1][j - 1] + sub(i - 1, j - 1))
                .min(dist[i - 1][j] + 1)
                .min(dist[i][j - 1] + 1);
        }
    }
    let mut c = SerCounts {
        n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && dist[i][j] == dist[i - 1][j - 1] + sub(i - 1, j - 1) {
            c.s += sub(i - 1, j - 1);
            i -= 1;
            j -= 1;
        } else if i > 0 && dist[i][j] == dist[i - 1][j] + 1 {
            c.d += 1;
            i -= 1;
        } else {
            c.i += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(c.errors(), dist[n][m]);
    Ok(c)
}

pub fn ser(gt: &[usize], pred: &Transcription) -> Result<SerCounts> {
    ser_symbols(gt, &pred.symbols())
}

/// Missing slots per ground-truth symbol, capped at 1.
pub fn missing_rate(gt: &[usize], pred: &Transcription) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::invalid("missing_rate: empty ground truth"));
    }
    Ok((pred.missing_count() as f64 / gt.len() as f64).min(1.0))
}

/// Number of ground-truth boxes matched one-to-one by a same-class detection
/// with IoU at least `iou_thr`. Detections are visited strongest first and
/// take the best-overlapping unmatched box.
pub fn matched_count(gt: &[GtBox], table: &CandidateTable, iou_thr: f64) -> usize {
    let mut dets = table.flatten();
    dets.sort_by(detection_order);
    let mut taken = vec![false; gt.len()];
    let mut hits = 0;
    for d in &dets {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(k, g)| !taken[*k] && g.class_id == d.class_id)
            .map(|(k, g)| (k, iou(&g.bbox, &d.bbox)))
            .filter(|&(_, v)| v >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((k, _)) = best {
            taken[k] = true;
            hits += 1;
        }
    }
    hits
}

/// Fraction of ground-truth boxes recovered; 1 when there is nothing to find.
pub fn recall_at_iou(gt: &[GtBox], table: &CandidateTable, iou_thr: f64) -> f64 {
    if gt.is_empty() {
        return 1.0;
    }
    matched_count(gt, table, iou_thr) as f64 / gt.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub tau: f32,
    #[serde(rename = "SER")]
    pub ser: f64,
    pub missing: f64,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub recall: f64,
    /// Emitted symbols over the whole corpus.
    #[serde(default)]
    pub symbols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn row(&self, tau: f32) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,SER,missing,S,D,I,N,recall\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{},{},{:.6}",
                r.tau, r.ser, r.missing, r.s, r.d, r.i, r.n, r.recall
            );
        }
        out
    }
}

/// One evaluated line: its ground truth and the candidates found on it.
pub struct LineResult<'a> {
    pub gt: &'a [GtBox],
    pub table: &'a CandidateTable,
}

/// Decodes every line at every threshold and micro-averages over symbols.
pub fn sweep_tables(lines: &[LineResult<'_>], thresholds: &[f32], interruption_px: usize, iou_thr: f64) -> Result<EvalReport> {
    if lines.is_empty() {
        return Err(Error::invalid("sweep: no lines"));
    }
    let total_gt: usize = lines.iter().map(|l| l.gt.len()).sum();
    let matched: usize = lines.iter().map(|l| matched_count(l.gt, l.table, iou_thr)).sum();
    let recall = if total_gt == 0 { 1.0 } else { matched as f64 / total_gt as f64 };
    let mut rows = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut counts = SerCounts::default();
        let (mut missing, mut symbols) = (0usize, 0usize);
        for l in lines {
            let t = decode_line(l.table, tau, interruption_px);
            let gt: Vec<usize> = l.gt.iter().map(|g| g.class_id).collect();
            counts.add(&ser(&gt, &t)?);
            missing += t.missing_count().min(gt.len());
            symbols += t.symbol_count();
        }
        rows.push(EvalRow {
            tau,
            ser: counts.ser(),
            missing: missing as f64 / counts.n as f64,
            s: counts.s,
            d: counts.d,
            i: counts.i,
            n: counts.n,
            recall,
            symbols,
        });
    }
    Ok(EvalReport {
        rows,
        config_hash: None,
        seed: None,
    })
}

/// Detects every line of a corpus against one support alphabet and sweeps the
/// thresholds. Also returns the candidate tables for inspection.
pub fn sweep<T: Real>(
    lines: &[LineSample],
    det: &Detector<T>,
    supports: &[SupportClass],
    thresholds: &[f32],
) -> Result<(EvalReport, Vec<CandidateTable>)> {
    let tables = lines
        .iter()
        .map(|l| detect_alphabet(det, &l.image, supports))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<LineResult<'_>> = lines
        .iter()
        .zip(&tables)
        .map(|(l, table)| LineResult { gt: &l.gt, table })
        .collect();
    let report = sweep_tables(&results, thresholds, det.config.interruption_px, 0.5)?;
    Ok((report, tables))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Detection};
    use crate::inference::ClassCandidates;
    use proptest::prelude::*;

    fn sym(v: &[usize]) -> Vec<Option<usize>> {
        v.iter().map(|&c| Some(c)).collect()
    }

    #[test]
    fn ser_examples() {
        assert_eq!(ser_symbols(&[1, 2, 3], &sym(&[1, 2, 3])).unwrap().ser(), 0.0);
        let c = ser_symbols(&[1, 2, 3], &[]).unwrap();
        assert_eq!((c.d, c.ser()), (3, 1.0));
        let c = ser_symbols(&[0, 1, 2, 3, 4], &sym(&[0, 9, 2, 3, 4, 5])).unwrap();
        assert_eq!((c.s, c.d, c.i), (1, 0, 1));
        assert!((c.ser() - 0.4).abs() < 1e-12);
        assert_eq!(ser_symbols(&[0, 1, 2], &[Some(0), None, Some(2)]).unwrap().ser(), 0.0);
        assert!(ser_symbols(&[], &[]).is_err());
    }

    fn gt_box(class_id: usize, x1: f32, x2: f32) -> GtBox {
        GtBox {
            bbox: BBox::new(x1, 0.0, x2, 40.0),
            class_id,
        }
    }

    fn table_of(dets: Vec<Detection>) -> CandidateTable {
        let mut by: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
        for d in dets {
            by.entry(d.class_id).or_default().push(d);
        }
        CandidateTable::new(
            200,
            by.into_iter()
                .map(|(class_id, detections)| ClassCandidates { class_id, detections })
                .collect(),
        )
    }

    #[test]
    fn recall_cases() {
        let gt = vec![gt_box(0, 0.0, 30.0), gt_box(1, 40.0, 70.0)];
        let perfect = table_of(gt.iter().map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 0.9 }).collect());
        assert_eq!(recall_at_iou(&gt, &perfect, 0.5), 1.0);
        assert_eq!(recall_at_iou(&gt, &table_of(vec![]), 0.5), 0.0);
        // One exact hit, one box of the wrong class on the second symbol, and
        // a duplicate of the first that cannot match twice.
        let half = table_of(vec![
            Detection { bbox: gt[0].bbox, class_id: 0, score: 0.9 },
            Detection { bbox: gt[0].bbox, class_id: 0, score: 0.8 },
            Detection { bbox: gt[1].bbox, class_id: 0, score: 0.7 },
        ]);
        assert_eq!(recall_at_iou(&gt, &half, 0.5), 0.5);
        assert_eq!(recall_at_iou(&[], &half, 0.5), 1.0);
    }

    #[test]
    fn missing_rate_cases() {
        let mk = |n_missing: usize, n_sym: usize| {
            let mut tokens = Vec::new();
            for k in 0..n_missing + n_sym {
                tokens.push(crate::decoder::Token {
                    kind: if k < n_missing { crate::decoder::TokenKind::Missing } else { crate::decoder::TokenKind::Symbol },
                    class: (k >= n_missing).then_some(0),
                    score: 0.5,
                    x1: 20 * k,
                    x2: 20 * k + 15,
                    source: k,
                });
            }
            Transcription { tokens, tau: 0.4, line: None }
        };
        let gt20 = vec![0; 20];
        assert_eq!(missing_rate(&gt20, &mk(0, 5)).unwrap(), 0.0);
        assert!((missing_rate(&gt20, &mk(2, 18)).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(missing_rate(&[0, 0, 0], &mk(3, 0)).unwrap(), 1.0);
        assert_eq!(missing_rate(&[0], &mk(3, 0)).unwrap(), 1.0);
    }

    #[test]
    fn sweep_rows_and_csv() {
        let gt = vec![gt_box(0, 0.0, 30.0), gt_box(1, 40.0, 70.0)];
        let t = table_of(vec![
            Detection { bbox: gt[0].bbox, class_id: 0, score: 0.9 },
            Detection { bbox: gt[1].bbox, class_id: 1, score: 0.5 },
        ]);
        let r = sweep_tables(&[LineResult { gt: &gt, table: &t }], &[0.4, 0.6, 0.8], 15, 0.5).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].ser, 0.0);
        assert_eq!(r.rows[0].missing, 0.0);
        assert_eq!(r.rows[1].missing, 0.5);
        assert_eq!(r.rows[1].symbols, 1);
        let csv = r.to_csv();
        assert!(csv.starts_with("tau,SER,missing,S,D,I,N,recall\n0.4,0.000000,0.000000,0,0,0,2,1.000000\n"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rows"][0]["SER"], 0.0);
    }

    proptest! {
        #[test]
        fn ser_bounds(gt in proptest::collection::vec(0usize..5, 1..15), pred in proptest::collection::vec(proptest::option::weighted(0.8, 0usize..5), 0..15)) {
            prop_assert_eq!(ser_symbols(&gt, &sym(&gt)).unwrap().errors(), 0);
            let c = ser_symbols(&gt, &pred).unwrap();
            prop_assert!(c.ser() <= (gt.len() + pred.len()) as f64 / gt.len() as f64);
            prop_assert!(c.errors() >= gt.len().abs_diff(pred.len()));
        }
    }
}
