//! Siamese few-shot detector: shared backbone, support-conditioned RPN, and a
//! similarity head on ROI-pooled query/support feature differences.

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::datagen::Glyph;
use crate::error::{Error, Result};
use crate::geometry::{
    decode_delta, detection_order, generate_anchors, nms, nms_indices, Anchor, BBox, BoxDelta, Detection,
};
use crate::numerics::{ops, Graph, NodeId, ParamId, ParamStore, Real, RoiWindow, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Query lines are rescaled to this height.
    pub line_height: usize,
    /// Support glyphs are centered on a square canvas of this side.
    pub support_size: usize,
    pub backbone_channels: Vec<usize>,
    pub output_stride: usize,
    pub roi_size: usize,
    pub anchor_scales: Vec<f32>,
    /// Height / width.
    pub anchor_ratios: Vec<f32>,
    pub rpn_pre_nms: usize,
    pub rpn_nms_iou: f64,
    pub rpn_proposal_count: usize,
    /// Proposals narrower or shorter than this (pixels) are discarded.
    pub min_proposal_size: f32,
    pub fc_width: usize,
    pub class_nms_iou: f64,
    pub score_floor: f32,
    pub confidence_thresholds: Vec<f32>,
    pub interruption_px: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            line_height: 64,
            support_size: 48,
            backbone_channels: vec![32, 64, 128, 256],
            output_stride: 8,
            roi_size: 7,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms: 1000,
            rpn_nms_iou: 0.7,
            rpn_proposal_count: 100,
            min_proposal_size: 2.0,
            fc_width: 512,
            class_nms_iou: 0.3,
            score_floor: 0.05,
            confidence_thresholds: vec![0.4, 0.6, 0.8],
            interruption_px: 15,
        }
    }
}

impl ModelConfig {
    /// Blocks followed by a 2×2 max pool.
    pub fn pooled_blocks(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    pub fn channels(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return fail(format!("backbone_channels {:?} must be nonempty and positive", self.backbone_channels));
        }
        if !self.output_stride.is_power_of_two() || self.pooled_blocks() > self.backbone_channels.len() {
            return fail(format!(
                "output_stride {} must be a power of two reachable with {} blocks",
                self.output_stride,
                self.backbone_channels.len()
            ));
        }
        if self.roi_size != 7 {
            return fail(format!("roi_size must be 7, got {}", self.roi_size));
        }
        if self.anchor_scales.is_empty()
            || self.anchor_ratios.is_empty()
            || self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0))
        {
            return fail("anchor scales and ratios must be nonempty and positive".into());
        }
        if self.line_height < self.output_stride || self.support_size < self.output_stride {
            return fail(format!(
                "line_height {} and support_size {} must be at least the stride {}",
                self.line_height, self.support_size, self.output_stride
            ));
        }
        if self.rpn_proposal_count == 0 || self.rpn_pre_nms == 0 || self.fc_width == 0 {
            return fail("proposal counts and fc_width must be positive".into());
        }
        if self.confidence_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail(format!("confidence thresholds {:?} must lie in (0, 1)", self.confidence_thresholds));
        }
        if self.interruption_px == 0 {
            return fail("interruption_px must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layers {
    backbone: Vec<[Layer; 2]>,
    rpn_conv: Layer,
    rpn_cls: Layer,
    rpn_reg: Layer,
    fc1: Layer,
    fc2: Layer,
    cls: Layer,
    reg: Layer,
}

/// Parameter names and shapes in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut conv = |name: String, k: usize, cin: usize, cout: usize| {
        out.push((format!("{name}.weight"), vec![k, k, cin, cout], k * k * cin));
        out.push((format!("{name}.bias"), vec![cout], 0));
    };
    let mut cin = 1;
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        conv(format!("backbone.block{i}.conv0"), 3, cin, c);
        conv(format!("backbone.block{i}.conv1"), 3, c, c);
        cin = c;
    }
    let c = cfg.channels();
    let a = cfg.anchors_per_cell();
    conv("rpn.conv".into(), 3, c, c);
    conv("rpn.cls".into(), 1, c, a);
    conv("rpn.reg".into(), 1, c, 4 * a);
    let flat = cfg.roi_size * cfg.roi_size * c;
    let f = cfg.fc_width;
    for (name, fin, fout) in [("head.fc1", flat, f), ("head.fc2", f, f), ("head.cls", f, 1), ("head.reg", f, 4)] {
        out.push((format!("{name}.weight"), vec![fin, fout], fin));
        out.push((format!("{name}.bias"), vec![fout], 0));
    }
    out
}

/// Output layers start small so initial scores sit near 0.5 and deltas near 0.
fn is_output_layer(name: &str) -> bool {
    ["rpn.cls.", "rpn.reg.", "head.cls.", "head.reg."]
        .iter()
        .any(|p| name.starts_with(p))
}

#[derive(Debug, Clone)]
pub struct Detector<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Intermediate results of one query/support pass.
pub struct ForwardNodes {
    pub query: NodeId,
    pub support: NodeId,
    pub support_vector: NodeId,
    pub attention: NodeId,
    pub rpn_cls: NodeId,
    pub rpn_reg: NodeId,
}

impl<T: Real> Detector<T> {
    /// Freshly initialized network; weights depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        config.validate()?;
        let mut rng = crate::datagen::child_rng(seed, 0);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in layout(&config) {
            if name.ends_with(".bias") {
                params.add(&name, Tensor::zeros(&shape))?;
            } else if is_output_layer(&name) {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-0.01..0.01)))
                    .collect();
                params.add(&name, Tensor::new(&shape, data)?)?;
            } else {
                params.add_he_uniform(&name, &shape, fan_in, &mut rng)?;
            }
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if params.len() != expected.len() {
            return Err(Error::data(format!(
                "model expects {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
            if params.get(id).value.shape() != shape.as_slice() {
                return Err(Error::data(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).value.shape()
                )));
            }
        }
        let layer = |name: &str| Layer {
            w: params.id(&format!("{name}.weight")).unwrap(),
            b: params.id(&format!("{name}.bias")).unwrap(),
        };
        let layers = Layers {
            backbone: (0..config.backbone_channels.len())
                .map(|i| [layer(&format!("backbone.block{i}.conv0")), layer(&format!("backbone.block{i}.conv1"))])
                .collect(),
            rpn_conv: layer("rpn.conv"),
            rpn_cls: layer("rpn.cls"),
            rpn_reg: layer("rpn.reg"),
            fc1: layer("head.fc1"),
            fc2: layer("head.fc2"),
            cls: layer("head.cls"),
            reg: layer("head.reg"),
        };
        Ok(Detector { config, params, layers })
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Names of the parameters shared by the query and support branches.
    pub fn backbone_param_names(&self) -> Vec<&str> {
        self.layers
            .backbone
            .iter()
            .flatten()
            .flat_map(|l| [l.w, l.b])
            .map(|id| self.params.get(id).name.as_str())
            .collect()
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: NodeId, l: Layer, pad: usize) -> Result<NodeId> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.conv2d(x, w, b, 1, pad)
    }

    fn dense(&self, g: &mut Graph<'_, T>, x: NodeId, l: Layer) -> Result<NodeId> {
        let (w, b) = (g.param(l.w), g.param(l.b));
        g.fc(x, w, b)
    }

    /// Backbone over a `[H, W, 1]` input node.
    pub fn build_backbone(&self, g: &mut Graph<'_, T>, image: NodeId) -> Result<NodeId> {
        let (h, w, _) = g.value(image).hwc();
        if h < self.config.output_stride || w < self.config.output_stride {
            return Err(Error::invalid(format!(
                "image {w}x{h} is smaller than one {}-pixel feature cell",
                self.config.output_stride
            )));
        }
        let mut x = image;
        for (i, block) in self.layers.backbone.iter().enumerate() {
            for &l in block {
                x = self.conv(g, x, l, 1)?;
                x = g.relu(x);
            }
            if i < self.config.pooled_blocks() {
                x = g.maxpool2(x)?;
            }
        }
        Ok(x)
    }

    /// Mean support feature map over the shots and its pooled `[1, 1, C]`
    /// vector.
    pub fn build_support(&self, g: &mut Graph<'_, T>, shots: &[NodeId]) -> Result<(NodeId, NodeId)> {
        if shots.is_empty() {
            return Err(Error::invalid("a support set needs at least one shot"));
        }
        let maps = shots
            .iter()
            .map(|&s| self.build_backbone(g, s))
            .collect::<Result<Vec<_>>>()?;
        let sf = g.mean(&maps)?;
        let s = g.global_avg_pool(sf)?;
        Ok((sf, s))
    }

    /// Objectness logits `[h, w, A]` and deltas `[h, w, 4A]` over an attention
    /// map.
    pub fn build_rpn(&self, g: &mut Graph<'_, T>, attention: NodeId) -> Result<(NodeId, NodeId)> {
        let x = self.conv(g, attention, self.layers.rpn_conv, 1)?;
        let x = g.relu(x);
        let cls = self.conv(g, x, self.layers.rpn_cls, 0)?;
        let reg = self.conv(g, x, self.layers.rpn_reg, 0)?;
        Ok((cls, reg))
    }

    /// Similarity logits `[N, 1]` and box deltas `[N, 4]` for pixel-space
    /// regions of the query.
    pub fn build_head(&self, g: &mut Graph<'_, T>, query: NodeId, support: NodeId, rois: &[BBox]) -> Result<(NodeId, NodeId)> {
        if rois.is_empty() {
            return Err(Error::invalid("head needs at least one region"));
        }
        let (fh, fw, c) = g.value(query).hwc();
        let (sh, sw, _) = g.value(support).hwc();
        let windows: Vec<RoiWindow> = rois
            .iter()
            .map(|b| feature_window(b, self.config.output_stride, fw, fh))
            .collect();
        let r = self.config.roi_size;
        let q = g.roi_pool(query, &windows, r)?;
        let full = RoiWindow {
            x0: 0,
            y0: 0,
            x1: sw,
            y1: sh,
        };
        let s = g.roi_pool(support, &[full], r)?;
        let s = g.reshape(s, &[r, r, c])?;
        let diff = g.elem_sub(q, s)?;
        let flat = g.reshape(diff, &[rois.len(), r * r * c])?;
        let h = self.dense(g, flat, self.layers.fc1)?;
        let h = g.relu(h);
        let h = self.dense(g, h, self.layers.fc2)?;
        let h = g.relu(h);
        let cls = self.dense(g, h, self.layers.cls)?;
        let reg = self.dense(g, h, self.layers.reg)?;
        Ok((cls, reg))
    }

    /// Query backbone, support branch, attention and RPN in one graph.
    pub fn build_forward(&self, g: &mut Graph<'_, T>, line: &Bitmap, shots: &[Bitmap]) -> Result<ForwardNodes> {
        let q_in = g.input(image_tensor(line));
        let query = self.build_backbone(g, q_in)?;
        let shot_nodes: Vec<NodeId> = shots.iter().map(|s| g.input(image_tensor(s))).collect();
        let (support, support_vector) = self.build_support(g, &shot_nodes)?;
        let attention = g.elem_mul(query, support_vector)?;
        let (rpn_cls, rpn_reg) = self.build_rpn(g, attention)?;
        Ok(ForwardNodes {
            query,
            support,
            support_vector,
            attention,
            rpn_cls,
            rpn_reg,
        })
    }

    /// Anchors of a feature map in pixel coordinates.
    pub fn anchors(&self, feat_w: usize, feat_h: usize) -> Vec<Anchor> {
        generate_anchors(
            feat_w,
            feat_h,
            self.config.output_stride,
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    /// Support glyph on the model's square canvas.
    pub fn support_input(&self, glyph: &Glyph) -> Bitmap {
        glyph.image.to_canvas(self.config.support_size)
    }

    /// Rescales a line to the model height; returns it with the factor that
    /// maps model pixels back to the original line.
    pub fn line_input(&self, line: &Bitmap) -> Result<(Bitmap, f32)> {
        if line.width() == 0 || line.height() == 0 {
            return Err(Error::invalid("empty line image"));
        }
        let h = self.config.line_height;
        if line.height() == h {
            return Ok((line.clone(), 1.0));
        }
        let scale = h as f32 / line.height() as f32;
        let w = ((line.width() as f32 * scale).round() as usize).max(self.config.output_stride);
        Ok((line.resize(w, h), line.width() as f32 / w as f32))
    }

    pub fn extract_features(&self, image: &Bitmap) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(image_tensor(image));
        let f = self.build_backbone(&mut g, x)?;
        Ok(g.value(f).clone())
    }

    /// Pooled support vector averaged over the shots' feature maps.
    pub fn pool_support(&self, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("pool_support needs at least one feature map"))?;
        let c = first.hwc().2;
        let mut acc = vec![T::zero(); c];
        for m in maps {
            let p = ops::global_avg_pool(m)?;
            if p.len() != c {
                return Err(Error::Shape {
                    op: "pool_support",
                    left: first.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
            for (a, v) in acc.iter_mut().zip(p.data()) {
                *a += *v;
            }
        }
        let k = T::from_usize(maps.len()).unwrap();
        Tensor::new(&[1, 1, c], acc.into_iter().map(|v| v / k).collect())
    }

    /// Region proposals from RPN outputs, in pixels on a `width`×`height` line.
    pub fn proposals_from(&self, cls: &Tensor<T>, reg: &Tensor<T>, width: usize, height: usize) -> Vec<(BBox, f32)> {
        let (fh, fw, _) = cls.hwc();
        let anchors = self.anchors(fw, fh);
        let (cd, rd) = (cls.data(), reg.data());
        let mut cand: Vec<(BBox, f32)> = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let d = BoxDelta {
                tx: rd[4 * i].to_f32().unwrap(),
                ty: rd[4 * i + 1].to_f32().unwrap(),
                tw: rd[4 * i + 2].to_f32().unwrap(),
                th: rd[4 * i + 3].to_f32().unwrap(),
            };
            let b = decode_delta(&d, a).clip(width as f32, height as f32);
            let min = self.config.min_proposal_size;
            if b.width() >= min && b.height() >= min {
                cand.push((b, ops::sigmoid_scalar(cd[i]).to_f32().unwrap()));
            }
        }
        let mut order: Vec<usize> = (0..cand.len()).collect();
        order.sort_by(|&a, &b| cand[b].1.total_cmp(&cand[a].1).then(a.cmp(&b)));
        order.truncate(self.config.rpn_pre_nms);
        let boxes: Vec<BBox> = order.iter().map(|&i| cand[i].0).collect();
        let scores: Vec<f32> = order.iter().map(|&i| cand[i].1).collect();
        nms_indices(&boxes, &scores, self.config.rpn_nms_iou, self.config.rpn_proposal_count)
            .into_iter()
            .map(|k| (boxes[k], scores[k]))
            .collect()
    }

    pub fn attention_map(&self, s: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
        attention_map(s, q)
    }

    /// Region proposals over an attention map for a `width`×`height` line.
    pub fn propose_regions(&self, attention: &Tensor<T>, width: usize, height: usize) -> Result<Vec<(BBox, f32)>> {
        let mut g = Graph::new(&self.params);
        let a = g.input(attention.clone());
        let (cls, reg) = self.build_rpn(&mut g, a)?;
        Ok(self.proposals_from(g.value(cls), g.value(reg), width, height))
    }

    /// One scored, refined detection per proposal (no suppression).
    pub fn combine_and_predict(
        &self,
        query: &Tensor<T>,
        proposals: &[BBox],
        support: &Tensor<T>,
        class_id: usize,
        width: usize,
        height: usize,
    ) -> Result<Vec<Detection>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let q = g.input(query.clone());
        let s = g.input(support.clone());
        let (cls, reg) = self.build_head(&mut g, q, s, proposals)?;
        Ok(self.head_detections(g.value(cls), g.value(reg), proposals, class_id, width, height))
    }

    fn head_detections(
        &self,
        cls: &Tensor<T>,
        reg: &Tensor<T>,
        proposals: &[BBox],
        class_id: usize,
        width: usize,
        height: usize,
    ) -> Vec<Detection> {
        let (cd, rd) = (cls.data(), reg.data());
        proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d: Vec<f32> = rd[4 * i..4 * i + 4].iter().map(|v| v.to_f32().unwrap()).collect();
                let refined = decode_delta(&BoxDelta::from_slice(&d), &Anchor::from_bbox(p)).clip(width as f32, height as f32);
                Detection {
                    bbox: if refined.width() > 0.0 && refined.height() > 0.0 { refined } else { *p },
                    class_id,
                    score: ops::sigmoid_scalar(cd[i]).to_f32().unwrap(),
                }
            })
            .collect()
    }

    /// Detections of one support class on a query line already at model
    /// height, given the line's feature map.
    pub(crate) fn detect_with_query(
        &self,
        query_feat: &Tensor<T>,
        line_w: usize,
        line_h: usize,
        shots: &[Glyph],
        class_id: usize,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new(&self.params);
        let q = g.input(query_feat.clone());
        let shot_nodes: Vec<NodeId> = shots
            .iter()
            .map(|s| g.input(image_tensor(&self.support_input(s))))
            .collect();
        let (sf, sv) = self.build_support(&mut g, &shot_nodes)?;
        let a = g.elem_mul(q, sv)?;
        let (cls, reg) = self.build_rpn(&mut g, a)?;
        let proposals: Vec<BBox> = self
            .proposals_from(g.value(cls), g.value(reg), line_w, line_h)
            .into_iter()
            .map(|p| p.0)
            .collect();
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let (hc, hr) = self.build_head(&mut g, q, sf, &proposals)?;
        let dets = self.head_detections(g.value(hc), g.value(hr), &proposals, class_id, line_w, line_h);
        let mut kept = nms(&dets, self.config.class_nms_iou);
        kept.sort_by(detection_order);
        Ok(kept)
    }

    /// End-to-end detection of one support class on a line of any height.
    pub fn forward_detect(&self, line: &Bitmap, shots: &[Glyph], class_id: usize) -> Result<Vec<Detection>> {
        let (input, back) = self.line_input(line)?;
        let feat = self.extract_features(&input)?;
        let dets = self.detect_with_query(&feat, input.width(), input.height(), shots, class_id)?;
        Ok(rescale_detections(dets, back, line.width(), line.height()))
    }
}

/// Maps detections from model pixels back to the original line.
pub(crate) fn rescale_detections(dets: Vec<Detection>, factor: f32, width: usize, height: usize) -> Vec<Detection> {
    if factor == 1.0 {
        return dets;
    }
    dets.into_iter()
        .map(|d| Detection {
            bbox: d.bbox.scale(factor, factor).clip(width as f32, height as f32),
            ..d
        })
        .collect()
}

/// `A[h, w, c] = S[c] · Q[h, w, c]`.
pub fn attention_map<T: Real>(s: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    ops::elem_mul(q, s)
}

/// Single-channel `[H, W, 1]` tensor of a bitmap.
pub fn image_tensor<T: Real>(b: &Bitmap) -> Tensor<T> {
    Tensor::new(
        &[b.height(), b.width(), 1],
        b.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
    )
    .expect("bitmap dimensions match its data")
}

/// Cell window of a pixel box: edges are rounded to cells and clamped so the
/// window always covers at least one cell of the map.
pub fn feature_window(b: &BBox, stride: usize, feat_w: usize, feat_h: usize) -> RoiWindow {
    let s = stride as f32;
    let quant = |lo: f32, hi: f32, extent: usize| {
        let last = extent as isize - 1;
        let start = ((lo / s).round() as isize).clamp(0, last);
        let end = ((hi / s).round() as isize).clamp(start + 1, extent as isize);
        (start as usize, end as usize)
    };
    let (x0, x1) = quant(b.x1, b.x2, feat_w);
    let (y0, y1) = quant(b.y1, b.y2, feat_h);
    RoiWindow { x0, y0, x1, y1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            line_height: 32,
            support_size: 16,
            backbone_channels: vec![4, 8],
            output_stride: 4,
            anchor_scales: vec![8.0, 16.0],
            anchor_ratios: vec![1.0, 2.0],
            fc_width: 8,
            rpn_proposal_count: 10,
            ..Default::default()
        }
    }

    fn glyph(w: usize, h: usize) -> Glyph {
        let mut b = Bitmap::new(w, h);
        for y in 0..h {
            b.set(w / 2, y, 1.0);
        }
        for x in 0..w {
            b.set(x, h / 3, 1.0);
        }
        Glyph::new(&b, 0, 0, 0).unwrap()
    }

    #[test]
    fn feature_shapes() {
        let det: Detector<f32> = Detector::new(ModelConfig::default(), 1).unwrap();
        let f = det.extract_features(&Bitmap::new(256, 64)).unwrap();
        assert_eq!(f.shape(), &[8, 32, 256]);
        let s = det.extract_features(&Bitmap::new(48, 48)).unwrap();
        assert_eq!(s.shape(), &[6, 6, 256]);
        assert!(det.extract_features(&Bitmap::new(7, 64)).is_err());
    }

    #[test]
    fn features_are_deterministic() {
        let det: Detector<f32> = Detector::new(micro_config(), 3).unwrap();
        let mut line = Bitmap::new(96, 32);
        line.paste_max(&glyph(12, 20).image, 10, 5);
        assert_eq!(det.extract_features(&line).unwrap(), det.extract_features(&line).unwrap());
        let again: Detector<f32> = Detector::new(micro_config(), 3).unwrap();
        assert_eq!(again.params, det.params);
    }

    #[test]
    fn pool_support_cases() {
        let det: Detector<f32> = Detector::new(micro_config(), 0).unwrap();
        let c = Tensor::full(&[4, 4, 2], 1.5f32);
        assert_eq!(det.pool_support(std::slice::from_ref(&c)).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(det.pool_support(&[c.clone(), c]).unwrap().data(), &[1.5, 1.5]);
        // Channel 0 holds 0..4 over a 2x2 map, channel 1 holds 10.
        let t = Tensor::new(&[2, 2, 2], vec![0.0f32, 10.0, 1.0, 10.0, 2.0, 10.0, 3.0, 10.0]).unwrap();
        assert_eq!(det.pool_support(&[t]).unwrap().data(), &[1.5, 10.0]);
        assert!(det.pool_support(&[]).is_err());
    }

    #[test]
    fn attention_by_hand() {
        let s = Tensor::new(&[1, 1, 2], vec![2.0f32, 3.0]).unwrap();
        let mut q = Tensor::zeros(&[2, 2, 2]);
        q.data_mut()[2] = 1.0;
        q.data_mut()[3] = 4.0;
        let a = attention_map(&s, &q).unwrap();
        assert_eq!(&a.data()[2..4], &[2.0, 12.0]);
        assert!(a.data()[..2].iter().chain(&a.data()[4..]).all(|&v| v == 0.0));
        assert!(attention_map(&Tensor::<f32>::zeros(&[1, 1, 3]), &q).is_err());
    }

    #[test]
    fn shared_backbone_names() {
        let det: Detector<f32> = Detector::new(micro_config(), 0).unwrap();
        let ids = |img: Bitmap| {
            let mut g = Graph::new(&det.params);
            let x = g.input(image_tensor(&img));
            det.build_backbone(&mut g, x).unwrap();
            g.param_ids()
                .into_iter()
                .map(|id| det.params.get(id).name.clone())
                .collect::<Vec<_>>()
        };
        let q = ids(Bitmap::new(96, 32));
        let s = ids(Bitmap::new(16, 16));
        assert_eq!(q, s);
        assert_eq!(q, det.backbone_param_names());
        assert!(q.iter().all(|n| n.starts_with("backbone.")));
    }

    #[test]
    fn proposals_and_detections_contracts() {
        let det: Detector<f32> = Detector::new(micro_config(), 5).unwrap();
        let mut line = Bitmap::new(96, 32);
        let g = glyph(12, 20);
        line.paste_max(&g.image, 30, 6);
        let q = det.extract_features(&line).unwrap();
        let sf = det.extract_features(&det.support_input(&g)).unwrap();
        let s = det.pool_support(std::slice::from_ref(&sf)).unwrap();
        let a = det.attention_map(&s, &q).unwrap();
        let props = det.propose_regions(&a, 96, 32).unwrap();
        assert!(!props.is_empty() && props.len() <= 10);
        assert_eq!(props, det.propose_regions(&a, 96, 32).unwrap());
        let boxes: Vec<BBox> = props.iter().map(|p| p.0).collect();
        let dets = det.combine_and_predict(&q, &boxes, &sf, 4, 96, 32).unwrap();
        assert_eq!(dets.len(), boxes.len());
        for d in &dets {
            assert!(d.score > 0.0 && d.score < 1.0);
            assert!(d.bbox.within(96.0, 32.0));
            assert_eq!(d.class_id, 4);
        }
    }

    #[test]
    fn duplicated_shot_matches_single_shot() {
        let det: Detector<f32> = Detector::new(micro_config(), 9).unwrap();
        let mut line = Bitmap::new(96, 32);
        let g = glyph(10, 18);
        line.paste_max(&g.image, 50, 7);
        let one = det.forward_detect(&line, std::slice::from_ref(&g), 0).unwrap();
        let two = det.forward_detect(&line, &[g.clone(), g], 0).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn taller_lines_are_rescaled() {
        let det: Detector<f32> = Detector::new(micro_config(), 2).unwrap();
        let mut line = Bitmap::new(200, 64);
        let g = glyph(20, 40);
        line.paste_max(&g.image, 60, 10);
        for d in det.forward_detect(&line, &[g], 1).unwrap() {
            assert!(d.bbox.within(200.0, 64.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { roi_size: 5, ..Default::default() },
            ModelConfig { output_stride: 6, ..Default::default() },
            ModelConfig { output_stride: 32, ..Default::default() },
            ModelConfig { confidence_thresholds: vec![0.4, 1.0], ..Default::default() },
            ModelConfig { interruption_px: 0, ..Default::default() },
            ModelConfig { backbone_channels: vec![], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn feature_window_always_valid() {
        let w = feature_window(&BBox::new(90.0, 0.0, 96.0, 32.0), 4, 24, 8);
        assert!(w.x0 < w.x1 && w.x1 <= 24 && w.y1 <= 8);
        let w = feature_window(&BBox::new(0.0, 0.0, 1.0, 1.0), 8, 10, 8);
        assert_eq!((w.x0, w.x1, w.y0, w.y1), (0, 1, 0, 1));
    }
}
