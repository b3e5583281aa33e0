//! Axis-aligned boxes, IoU, greedy non-maximum suppression, anchor grids and
//! the center/log-size box-delta coding shared by the RPN and the head.
//!
//! Coordinates are pixels with the origin at the top-left corner, `x` growing
//! rightward and `y` downward.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    /// Builds a box, swapping coordinates so that `x1 <= x2` and `y1 <= y2`.
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scale(&self, sx: f32, sy: f32) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn within(&self, width: f32, height: f32) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Intersection over union. A box with zero area has IoU 0 with everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = (a.x2 as f64 - a.x1 as f64) * (a.y2 as f64 - a.y1 as f64);
    let area_b = (b.x2 as f64 - b.x1 as f64) * (b.y2 as f64 - b.y1 as f64);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored, class-tagged box produced for one support class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f32,
}

/// Score descending, then `x1`, `y1` and class ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy NMS: keeps the best remaining detection and discards every other
/// with IoU `>= iou_threshold` against it. Output is in [`detection_order`].
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(&dets[i], &dets[j]).then(i.cmp(&j)));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        keep.push(dets[i]);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if !suppressed[later] && iou(&dets[i].bbox, &dets[j].bbox) >= iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    keep
}

/// NMS on bare boxes with scores; returns kept indices in score order.
pub fn nms_indices(boxes: &[BBox], scores: &[f32], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .total_cmp(&scores[i])
            .then(boxes[i].x1.total_cmp(&boxes[j].x1))
            .then(boxes[i].y1.total_cmp(&boxes[j].y1))
            .then(i.cmp(&j))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.len() >= limit {
            break;
        }
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) < iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center_x: f32,
    pub center_y: f32,
    pub width: f32,
    pub height: f32,
    pub row: usize,
    pub col: usize,
    pub shape: usize,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center_x, self.center_y, self.width, self.height)
    }

    /// Treats an arbitrary box as an anchor, e.g. to refine proposals.
    pub fn from_bbox(b: &BBox) -> Anchor {
        let (cx, cy) = b.center();
        Anchor {
            center_x: cx,
            center_y: cy,
            width: b.width(),
            height: b.height(),
            row: 0,
            col: 0,
            shape: 0,
        }
    }
}

/// One anchor per (cell, scale, ratio), ordered row-major over cells and then
/// by shape (scales outer, ratios inner). `ratio` is height / width and each
/// shape keeps the area `scale^2`.
pub fn generate_anchors(
    feat_w: usize,
    feat_h: usize,
    stride: usize,
    scales: &[f32],
    ratios: &[f32],
) -> Vec<Anchor> {
    let shapes: Vec<(f32, f32)> = scales
        .iter()
        .flat_map(|&s| {
            ratios.iter().map(move |&r| {
                let root = (r as f64).sqrt();
                ((s as f64 / root) as f32, (s as f64 * root) as f32)
            })
        })
        .collect();
    let mut anchors = Vec::with_capacity(feat_w * feat_h * shapes.len());
    for row in 0..feat_h {
        for col in 0..feat_w {
            let cx = (col as f32 + 0.5) * stride as f32;
            let cy = (row as f32 + 0.5) * stride as f32;
            for (shape, &(w, h)) in shapes.iter().enumerate() {
                anchors.push(Anchor {
                    center_x: cx,
                    center_y: cy,
                    width: w,
                    height: h,
                    row,
                    col,
                    shape,
                });
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f32,
    pub ty: f32,
    pub tw: f32,
    pub th: f32,
}

impl BoxDelta {
    pub fn as_array(&self) -> [f32; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f32]) -> BoxDelta {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode_delta(gt: &BBox, anchor: &Anchor) -> Result<BoxDelta> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::invalid(format!(
            "encode_delta: ground-truth box {gt:?} has non-positive size"
        )));
    }
    if !(anchor.width > 0.0 && anchor.height > 0.0) {
        return Err(Error::invalid(format!(
            "encode_delta: anchor {anchor:?} has non-positive size"
        )));
    }
    let gw = gt.x2 as f64 - gt.x1 as f64;
    let gh = gt.y2 as f64 - gt.y1 as f64;
    let gx = (gt.x1 as f64 + gt.x2 as f64) / 2.0;
    let gy = (gt.y1 as f64 + gt.y2 as f64) / 2.0;
    let (aw, ah) = (anchor.width as f64, anchor.height as f64);
    Ok(BoxDelta {
        tx: ((gx - anchor.center_x as f64) / aw) as f32,
        ty: ((gy - anchor.center_y as f64) / ah) as f32,
        tw: (gw / aw).ln() as f32,
        th: (gh / ah).ln() as f32,
    })
}

/// Log-size deltas are clamped so that a wild prediction cannot overflow.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn decode_delta(d: &BoxDelta, anchor: &Anchor) -> BBox {
    let (aw, ah) = (anchor.width as f64, anchor.height as f64);
    let cx = anchor.center_x as f64 + d.tx as f64 * aw;
    let cy = anchor.center_y as f64 + d.ty as f64 * ah;
    let w = aw * (d.tw as f64).min(MAX_LOG_SCALE).exp();
    let h = ah * (d.th as f64).min(MAX_LOG_SCALE).exp();
    BBox {
        x1: (cx - w / 2.0) as f32,
        y1: (cy - h / 2.0) as f32,
        x2: (cx + w / 2.0) as f32,
        y2: (cy + h / 2.0) as f32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id: 0,
            score,
        }
    }

    #[test]
    fn iou_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let half = iou(&b, &BBox::new(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-12);
        let flat = BBox::new(0.0, 5.0, 10.0, 5.0);
        assert_eq!(iou(&flat, &b), 0.0);
        assert_eq!(iou(&flat, &flat), 0.0);
    }

    #[test]
    fn nms_cases() {
        let single = vec![det(0.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(nms(&single, 0.5), single);

        let coincident = vec![det(0.0, 0.0, 10.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 10.0, 0.9)];
        let kept = nms(&coincident, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let disjoint = vec![det(0.0, 0.0, 10.0, 10.0, 0.8), det(20.0, 0.0, 30.0, 10.0, 0.9)];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);
    }

    #[test]
    fn nms_breaks_score_ties_by_position() {
        let dets = vec![det(20.0, 0.0, 30.0, 10.0, 0.5), det(0.0, 0.0, 10.0, 10.0, 0.5)];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept[0].bbox.x1, 0.0);
        assert_eq!(kept[1].bbox.x1, 20.0);
    }

    #[test]
    fn anchors_single_cell() {
        let a = generate_anchors(1, 1, 16, &[32.0], &[1.0]);
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].center_x, a[0].center_y), (8.0, 8.0));
        assert_eq!((a[0].width, a[0].height), (32.0, 32.0));
        assert_eq!(generate_anchors(2, 1, 16, &[32.0], &[1.0]).len(), 2);
        let tall = generate_anchors(1, 1, 8, &[32.0], &[0.5]);
        assert!((tall[0].height / tall[0].width - 0.5).abs() < 1e-6);
    }

    #[test]
    fn anchor_count_and_order() {
        let a = generate_anchors(3, 2, 8, &[16.0, 32.0, 64.0], &[0.5, 1.0, 2.0]);
        assert_eq!(a.len(), 3 * 2 * 9);
        assert_eq!((a[9].row, a[9].col, a[9].shape), (0, 1, 0));
        assert_eq!((a[27].row, a[27].col), (1, 0));
    }

    #[test]
    fn delta_cases() {
        let anchor = generate_anchors(1, 1, 16, &[32.0], &[1.0])[0];
        let same = encode_delta(&anchor.bbox(), &anchor).unwrap();
        assert_eq!(same, BoxDelta::default());

        let wide = BBox::from_center(8.0, 8.0, 64.0, 32.0);
        let d = encode_delta(&wide, &anchor).unwrap();
        assert!((d.tw - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!((d.tx, d.ty, d.th), (0.0, 0.0, 0.0));

        assert!(encode_delta(&BBox::new(3.0, 3.0, 3.0, 9.0), &anchor).is_err());
    }
}
