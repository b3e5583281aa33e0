//! Episodic training and fine-tuning of the detector.

use std::fmt::Write as _;

use log::{debug, info, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{child_rng, sample_episode, Atlas, EpisodeConfig, Glyph, LineSample, Split};
use crate::detector::{image_tensor, Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, Anchor, BBox, BoxDelta};
use crate::numerics::{Gradients, Graph, NodeId, ParamStore};
use crate::preprocess::crop_support;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Parameter updates.
    pub iterations: usize,
    /// Episodes whose losses are averaged into one update.
    pub episodes_per_batch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub episode: EpisodeConfig,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub head_pos_iou: f64,
    pub head_neg_iou: f64,
    /// Sampled anchors (and head regions) per line and class.
    pub samples_per_line: usize,
    pub positive_fraction: f64,
    pub cls_weight: f32,
    pub reg_weight: f32,
    /// Learning-rate factor applied by [`fine_tune`].
    pub finetune_lr_scale: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 10.0,
            iterations: 1000,
            episodes_per_batch: 1,
            n_way: 5,
            k_shot: 1,
            episode: EpisodeConfig::default(),
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            head_pos_iou: 0.5,
            head_neg_iou: 0.5,
            samples_per_line: 64,
            positive_fraction: 0.25,
            cls_weight: 1.0,
            reg_weight: 1.0,
            finetune_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_pair = |pos: f64, neg: f64| 0.0 < neg && neg <= pos && pos <= 1.0;
        if !ok_pair(self.rpn_pos_iou, self.rpn_neg_iou) || !ok_pair(self.head_pos_iou, self.head_neg_iou) {
            return Err(Error::invalid("IoU thresholds must satisfy 0 < neg <= pos <= 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("learning_rate must be positive and momentum in [0, 1)"));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.episodes_per_batch == 0 || self.samples_per_line == 0 {
            return Err(Error::invalid("n_way, k_shot, episodes_per_batch and samples_per_line must be positive"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::invalid("positive_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// (line, class) pairs seen per update.
    pub fn pairs_per_iteration(&self) -> usize {
        self.episodes_per_batch * self.episode.queries * self.n_way
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<Label>,
    /// Regression target of each positive towards its best ground truth.
    pub deltas: Vec<Option<BoxDelta>>,
    /// Best IoU of each box with any ground truth.
    pub best_iou: Vec<f64>,
}

impl Assignment {
    pub fn count(&self, l: Label) -> usize {
        self.labels.iter().filter(|&&x| x == l).count()
    }
}

/// Labels boxes against the ground truth of one class: IoU at or above
/// `pos_thr` is positive, at or below `neg_thr` negative, anything between
/// ignored. Each ground truth's best-overlapping box (first on ties, IoU > 0)
/// is forced positive.
pub fn assign_targets(boxes: &[BBox], gt: &[BBox], pos_thr: f64, neg_thr: f64) -> Assignment {
    let n = boxes.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut labels = vec![Label::Negative; n];
    for (gi, g) in gt.iter().enumerate() {
        let mut top = (usize::MAX, 0.0f64);
        for (bi, b) in boxes.iter().enumerate() {
            let v = iou(b, g);
            if v > best_iou[bi] {
                best_iou[bi] = v;
                best_gt[bi] = gi;
            }
            if v > top.1 {
                top = (bi, v);
            }
        }
        if top.0 != usize::MAX {
            labels[top.0] = Label::Positive;
        }
    }
    for i in 0..n {
        if labels[i] == Label::Positive {
            continue;
        }
        labels[i] = if best_iou[i] >= pos_thr {
            Label::Positive
        } else if best_iou[i] <= neg_thr {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    let deltas = (0..n)
        .map(|i| {
            (labels[i] == Label::Positive)
                .then(|| encode_delta(&gt[best_gt[i]], &Anchor::from_bbox(&boxes[i])).ok())
                .flatten()
        })
        .collect();
    Assignment {
        labels,
        deltas,
        best_iou,
    }
}

/// Picks at most `n` labelled boxes with at most `n · positive_fraction`
/// positives, the rest negatives. Returned indices are sorted.
pub fn sample_targets<R: Rng>(a: &Assignment, n: usize, positive_fraction: f64, rng: &mut R) -> Vec<usize> {
    let of = |l: Label| -> Vec<usize> { (0..a.labels.len()).filter(|&i| a.labels[i] == l).collect() };
    let (pos, neg) = (of(Label::Positive), of(Label::Negative));
    let take = |v: &[usize], k: usize, rng: &mut R| -> Vec<usize> {
        if v.len() <= k {
            v.to_vec()
        } else {
            index::sample(rng, v.len(), k).into_iter().map(|i| v[i]).collect()
        }
    };
    let cap = ((n as f64 * positive_fraction).floor() as usize).min(n);
    let mut chosen = take(&pos, cap, rng);
    let rest = n - chosen.len();
    chosen.extend(take(&neg, rest, rng));
    chosen.sort_unstable();
    chosen
}

/// Loss nodes of one scoring stage.
#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub cls: NodeId,
    pub reg: Option<NodeId>,
}

/// BCE over the sampled boxes of `logits` (one logit per box) plus smooth-L1
/// between `deltas` (four per box) and the positive targets, averaged over
/// positives. `None` when nothing was sampled.
pub fn loss<T: crate::numerics::Real>(
    g: &mut Graph<'_, T>,
    logits: NodeId,
    deltas: NodeId,
    a: &Assignment,
    sampled: &[usize],
) -> Result<Option<StageLoss>> {
    let picks: Vec<(usize, T)> = sampled
        .iter()
        .filter(|&&i| a.labels[i] != Label::Ignore)
        .map(|&i| (i, if a.labels[i] == Label::Positive { T::one() } else { T::zero() }))
        .collect();
    if picks.is_empty() {
        return Ok(None);
    }
    let cls = g.sigmoid_bce(logits, picks)?;
    let mut reg_picks = Vec::new();
    let mut positives = 0usize;
    for &i in sampled {
        if let (Label::Positive, Some(d)) = (a.labels[i], a.deltas[i]) {
            positives += 1;
            for (k, v) in d.as_array().into_iter().enumerate() {
                reg_picks.push((4 * i + k, T::from_f32(v).unwrap()));
            }
        }
    }
    let reg = if positives > 0 {
        Some(g.smooth_l1(deltas, reg_picks, T::from_usize(positives).unwrap())?)
    } else {
        None
    };
    Ok(Some(StageLoss { cls, reg }))
}

/// One query line with the support sets it is trained against.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub line: LineSample,
    pub supports: Vec<(usize, Vec<Glyph>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,total,cls,reg\n");
    for r in trace {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.iteration, r.total, r.cls, r.reg);
    }
    out
}

pub struct Trained {
    pub detector: Detector<f32>,
    pub trace: Vec<TraceRow>,
}

/// Builds the summed loss over every support class of one example. Returns the
/// loss node with its classification and regression parts, or `None` if no
/// class produced a training signal.
pub fn example_loss(
    det: &Detector<f32>,
    g: &mut Graph<'_, f32>,
    ex: &TrainExample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(NodeId, f64, f64)>> {
    let (line_img, _) = det.line_input(&ex.line.image)?;
    if line_img.height() != ex.line.image.height() {
        return Err(Error::invalid("training lines must already have the model line height"));
    }
    let (lw, lh) = (line_img.width(), line_img.height());
    let q_in = g.input(image_tensor(&line_img));
    let q = det.build_backbone(g, q_in)?;
    let (fh, fw, _) = g.value(q).hwc();
    let anchors = det.anchors(fw, fh);
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox()).collect();
    let all_gt: Vec<BBox> = ex.line.gt.iter().map(|g| g.bbox).collect();

    let mut terms: Vec<(NodeId, f32)> = Vec::new();
    let (mut cls_sum, mut reg_sum) = (0.0f64, 0.0f64);
    let n_pairs = ex.supports.len().max(1) as f32;
    for (class_id, shots) in &ex.supports {
        let gt = ex.line.boxes_of(*class_id);
        let shot_nodes: Vec<NodeId> = shots.iter().map(|s| g.input(image_tensor(&det.support_input(s)))).collect();
        let (sf, sv) = det.build_support(g, &shot_nodes)?;
        let a = g.elem_mul(q, sv)?;
        let (rpn_cls, rpn_reg) = det.build_rpn(g, a)?;

        let rpn_assign = assign_targets(&anchor_boxes, &gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
        let rpn_sample = sample_targets(&rpn_assign, cfg.samples_per_line, cfg.positive_fraction, rng);
        let mut stages = Vec::new();
        if let Some(s) = loss(g, rpn_cls, rpn_reg, &rpn_assign, &rpn_sample)? {
            stages.push(s);
        }

        let mut rois: Vec<BBox> = det
            .proposals_from(g.value(rpn_cls), g.value(rpn_reg), lw, lh)
            .into_iter()
            .map(|p| p.0)
            .collect();
        rois.extend(all_gt.iter().copied());
        let head_assign = assign_targets(&rois, &gt, cfg.head_pos_iou, cfg.head_neg_iou);
        let head_sample = sample_targets(&head_assign, cfg.samples_per_line, cfg.positive_fraction, rng);
        if !head_sample.is_empty() {
            let sampled_rois: Vec<BBox> = head_sample.iter().map(|&i| rois[i]).collect();
            let sub = Assignment {
                labels: head_sample.iter().map(|&i| head_assign.labels[i]).collect(),
                deltas: head_sample.iter().map(|&i| head_assign.deltas[i]).collect(),
                best_iou: head_sample.iter().map(|&i| head_assign.best_iou[i]).collect(),
            };
            let (hc, hr) = det.build_head(g, q, sf, &sampled_rois)?;
            let all: Vec<usize> = (0..sampled_rois.len()).collect();
            if let Some(s) = loss(g, hc, hr, &sub, &all)? {
                stages.push(s);
            }
        }
        for s in stages {
            cls_sum += g.scalar(s.cls) as f64 / n_pairs as f64;
            terms.push((s.cls, cfg.cls_weight / n_pairs));
            if let Some(r) = s.reg {
                reg_sum += g.scalar(r) as f64 / n_pairs as f64;
                terms.push((r, cfg.reg_weight / n_pairs));
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = g.weighted_sum(&terms)?;
    Ok(Some((total, cls_sum, reg_sum)))
}

/// Loss of the whole pipeline on one line with fixed head regions and every
/// labelled anchor used (no sampling), so the value is a smooth function of
/// the parameters away from ReLU and max-pool ties. Used for gradient checks.
pub fn pipeline_loss<T: crate::numerics::Real>(
    det: &Detector<T>,
    g: &mut Graph<'_, T>,
    line: &LineSample,
    supports: &[(usize, Vec<Glyph>)],
    regions: &[BBox],
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let q_in = g.input(image_tensor(&line.image));
    let q = det.build_backbone(g, q_in)?;
    let (fh, fw, _) = g.value(q).hwc();
    let anchor_boxes: Vec<BBox> = det.anchors(fw, fh).iter().map(|a| a.bbox()).collect();
    let mut terms = Vec::new();
    for (class_id, shots) in supports {
        let gt = line.boxes_of(*class_id);
        let shot_nodes: Vec<NodeId> = shots.iter().map(|s| g.input(image_tensor(&det.support_input(s)))).collect();
        let (sf, sv) = det.build_support(g, &shot_nodes)?;
        let a = g.elem_mul(q, sv)?;
        let (rpn_cls, rpn_reg) = det.build_rpn(g, a)?;
        let ra = assign_targets(&anchor_boxes, &gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
        let all: Vec<usize> = (0..anchor_boxes.len()).collect();
        let ha = assign_targets(regions, &gt, cfg.head_pos_iou, cfg.head_neg_iou);
        let (hc, hr) = det.build_head(g, q, sf, regions)?;
        let head_all: Vec<usize> = (0..regions.len()).collect();
        for s in [loss(g, rpn_cls, rpn_reg, &ra, &all)?, loss(g, hc, hr, &ha, &head_all)?].into_iter().flatten() {
            terms.push((s.cls, T::one()));
            if let Some(r) = s.reg {
                terms.push((r, T::one()));
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("pipeline_loss: no labelled samples"));
    }
    g.weighted_sum(&terms)
}

/// Stateful first-order optimizer over an f32 parameter store.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    weight_decay: f32,
    clip: f32,
    state1: Vec<Vec<f32>>,
    state2: Vec<Vec<f32>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.value.len()]).collect();
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip,
            state1: zeros(),
            state2: zeros(),
            steps: 0,
        }
    }

    /// Applies the gradients accumulated in the store, then clears them.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f32) {
        let norm = params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip as f64 {
            (self.clip as f64 / norm) as f32
        } else {
            1.0
        };
        self.steps += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let bc1 = 1.0 - b1.powi(self.steps);
        let bc2 = 1.0 - b2.powi(self.steps);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.state1[k], &mut self.state2[k]);
            let grads = p.grad.data().to_vec();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i] * scale + self.weight_decay * *w;
                match self.kind {
                    OptimizerKind::Sgd => {
                        m[i] = self.momentum * m[i] + g;
                        *w -= lr * m[i];
                    }
                    OptimizerKind::Adam => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
    }
}

/// Generic loop: every iteration draws a batch of examples, averages their
/// losses, and takes one optimizer step.
pub fn run_training<F>(mut det: Detector<f32>, cfg: &TrainConfig, lr: f32, mut draw: F) -> Result<Trained>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<TrainExample>>,
{
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg, &det.params);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = child_rng(cfg.seed ^ 0x7472_6169_6e00, it as u64);
        let batch = draw(it, &mut rng)?;
        let mut row = TraceRow {
            iteration: it,
            ..Default::default()
        };
        let mut used = 0usize;
        let mut grads: Vec<Gradients<f32>> = Vec::with_capacity(batch.len());
        for ex in &batch {
            let mut g = Graph::new(&det.params);
            let Some((node, cls, reg)) = example_loss(&det, &mut g, ex, cfg, &mut rng)? else {
                continue;
            };
            let total = g.scalar(node) as f64;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {it}: total {total}, cls {cls}, reg {reg}"
                )));
            }
            grads.push(g.backward(node)?);
            row.total += total;
            row.cls += cls;
            row.reg += reg;
            used += 1;
        }
        if used == 0 {
            debug!("iteration {it}: no training signal");
            trace.push(row);
            continue;
        }
        for gr in &grads {
            gr.accumulate_into(&mut det.params);
        }
        let inv = 1.0 / used as f32;
        for p in det.params.iter_mut() {
            if p.grad.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {} at iteration {it}", p.name)));
            }
            p.grad.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        row.total /= used as f64;
        row.cls /= used as f64;
        row.reg /= used as f64;
        opt.step(&mut det.params, lr);
        if it % 50 == 0 || it + 1 == cfg.iterations {
            info!("iteration {it}: loss {:.4} (cls {:.4}, reg {:.4})", row.total, row.cls, row.reg);
        }
        trace.push(row);
    }
    Ok(Trained { detector: det, trace })
}

/// Episodic training on the train split of an atlas.
pub fn train(atlas: &Atlas, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Trained> {
    cfg.validate()?;
    if atlas.class_ids(Split::Train).is_empty() {
        return Err(Error::data("the atlas has no training classes"));
    }
    let det = Detector::new(model_cfg.clone(), cfg.seed)?;
    train_from(det, atlas, cfg)
}

/// Continues episodic training of an existing detector.
pub fn train_from(det: Detector<f32>, atlas: &Atlas, cfg: &TrainConfig) -> Result<Trained> {
    let mut ep_cfg = cfg.episode.clone();
    ep_cfg.compose.line_height = det.config.line_height;
    run_training(det, cfg, cfg.learning_rate, |_, rng| {
        (0..cfg.episodes_per_batch)
            .map(|_| {
                let ep = sample_episode(atlas, Split::Train, cfg.n_way, cfg.k_shot, rng, &ep_cfg)?;
                let supports: Vec<(usize, Vec<Glyph>)> =
                    ep.support.into_iter().map(|s| (s.class_id, s.shots)).collect();
                Ok(ep
                    .queries
                    .into_iter()
                    .map(|line| TrainExample {
                        line,
                        supports: supports.clone(),
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    })
}

/// Classes with at least one ground-truth box in `pages`, sorted.
pub fn page_classes(pages: &[LineSample]) -> Vec<usize> {
    let mut c: Vec<usize> = pages.iter().flat_map(|l| l.labels()).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Retrains on a few labelled lines of a target alphabet with the learning
/// rate scaled by `finetune_lr_scale`. `classes` restricts training to an
/// alphabet; listed classes without any box are skipped with a warning.
pub fn fine_tune(det: &Detector<f32>, pages: &[LineSample], classes: Option<&[usize]>, cfg: &TrainConfig) -> Result<Trained> {
    train_on_lines(det.clone(), pages, classes, cfg, cfg.learning_rate * cfg.finetune_lr_scale)
}

/// Episodic training on annotated lines at learning rate `lr`. Supports are
/// cropped from the lines' own boxes, preferring lines other than the current
/// query.
pub fn train_on_lines(
    det: Detector<f32>,
    pages: &[LineSample],
    classes: Option<&[usize]>,
    cfg: &TrainConfig,
    lr: f32,
) -> Result<Trained> {
    cfg.validate()?;
    let present = page_classes(pages);
    let pool: Vec<usize> = match classes {
        Some(list) => {
            for c in list.iter().filter(|c| !present.contains(c)) {
                warn!("class {c} has no labelled instance and is excluded from fine-tuning");
            }
            list.iter().copied().filter(|c| present.contains(c)).collect()
        }
        None => present,
    };
    if pages.is_empty() || pool.is_empty() || cfg.iterations == 0 {
        return Ok(Trained {
            detector: det,
            trace: Vec::new(),
        });
    }
    for (i, l) in pages.iter().enumerate() {
        if l.image.height() != det.config.line_height {
            return Err(Error::data(format!(
                "training line {i} is {} px high, the model expects {}",
                l.image.height(),
                det.config.line_height
            )));
        }
    }
    // (line, box) locations of every instance per class.
    let instances: Vec<Vec<(usize, BBox)>> = pool
        .iter()
        .map(|&c| {
            pages
                .iter()
                .enumerate()
                .flat_map(|(li, l)| l.boxes_of(c).into_iter().map(move |b| (li, b)))
                .collect()
        })
        .collect();
    let n_way = cfg.n_way.min(pool.len());
    run_training(det, cfg, lr, |_, rng| {
        let mut batch = Vec::new();
        for _ in 0..cfg.episodes_per_batch * cfg.episode.queries {
            let qi = rng.gen_range(0..pages.len());
            let line = &pages[qi];
            // Classes on the query line come first so every example has positives.
            let mut on_line: Vec<usize> = (0..pool.len()).filter(|&k| line.labels().contains(&pool[k])).collect();
            on_line.shuffle(rng);
            let mut others: Vec<usize> = (0..pool.len()).filter(|k| !on_line.contains(k)).collect();
            others.shuffle(rng);
            let n_on = on_line.len().min(n_way.div_ceil(2).max(1));
            let mut picked: Vec<usize> = on_line[..n_on].to_vec();
            picked.extend(others.iter().chain(&on_line[n_on..]).take(n_way - n_on));
            let mut supports = Vec::with_capacity(picked.len());
            for k in picked {
                let inst = &instances[k];
                let elsewhere: Vec<&(usize, BBox)> = inst.iter().filter(|(li, _)| *li != qi).collect();
                let source: Vec<&(usize, BBox)> = if elsewhere.is_empty() { inst.iter().collect() } else { elsewhere };
                let shots = (0..cfg.k_shot)
                    .map(|s| {
                        let &&(li, b) = if source.len() >= cfg.k_shot {
                            &source[(rng.gen_range(0..source.len()) + s) % source.len()]
                        } else {
                            &source[rng.gen_range(0..source.len())]
                        };
                        crop_support(&pages[li].image, &b.clip(pages[li].image.width() as f32, pages[li].image.height() as f32), pool[k])
                    })
                    .collect::<Result<Vec<_>>>()?;
                supports.push((pool[k], shots));
            }
            batch.push(TrainExample {
                line: line.clone(),
                supports,
            });
        }
        Ok(batch)
    })
}

/// Mean of the first and last `window` totals of a trace.
pub fn smoothed_ends(trace: &[TraceRow], window: usize) -> Option<(f64, f64)> {
    let w = window.min(trace.len());
    if w == 0 {
        return None;
    }
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    Some((mean(&trace[..w]), mean(&trace[trace.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn b(x1: f32, x2: f32) -> BBox {
        BBox::new(x1, 0.0, x2, 10.0)
    }

    #[test]
    fn assignment_examples() {
        let gt = [b(0.0, 10.0)];
        let a = assign_targets(&[b(0.0, 10.0), b(50.0, 60.0), b(0.0, 6.0), b(2.0, 12.0)], &gt, 0.7, 0.3);
        assert_eq!(a.labels[0], Label::Positive);
        assert_eq!(a.deltas[0], Some(BoxDelta::default()));
        assert_eq!(a.labels[1], Label::Negative);
        // IoU 0.6 sits between the thresholds.
        assert_eq!(a.labels[2], Label::Ignore);
        // 8/12 = 0.667: also ignored.
        assert_eq!(a.labels[3], Label::Ignore);
        let none = assign_targets(&[b(0.0, 10.0)], &[], 0.7, 0.3);
        assert_eq!(none.labels, vec![Label::Negative]);
    }

    #[test]
    fn best_box_is_forced_positive() {
        let a = assign_targets(&[b(0.0, 30.0), b(100.0, 110.0)], &[b(0.0, 10.0)], 0.7, 0.3);
        assert_eq!(a.labels, vec![Label::Positive, Label::Negative]);
        assert!(a.deltas[0].is_some());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(&[4, 1]));
        let deltas = g.input(Tensor::zeros(&[4, 4]));
        let a = Assignment {
            labels: vec![Label::Positive, Label::Negative, Label::Positive, Label::Negative],
            deltas: vec![Some(BoxDelta::default()), None, Some(BoxDelta::default()), None],
            best_iou: vec![1.0, 0.0, 1.0, 0.0],
        };
        let l = loss(&mut g, logits, deltas, &a, &[0, 1, 2, 3]).unwrap().unwrap();
        assert!((g.scalar(l.cls) - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(g.scalar(l.reg.unwrap()), 0.0);
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let d = BoxDelta { tx: 0.1, ty: -0.2, tw: 0.3, th: 0.0 };
        let logits = g.input(Tensor::new(&[2, 1], vec![20.0, -20.0]).unwrap());
        let mut reg = vec![0.0; 8];
        for (k, v) in d.as_array().iter().enumerate() {
            reg[k] = *v as f64;
        }
        let deltas = g.input(Tensor::new(&[2, 4], reg).unwrap());
        let a = Assignment {
            labels: vec![Label::Positive, Label::Negative],
            deltas: vec![Some(d), None],
            best_iou: vec![1.0, 0.0],
        };
        let l = loss(&mut g, logits, deltas, &a, &[0, 1]).unwrap().unwrap();
        assert!(g.scalar(l.cls) + g.scalar(l.reg.unwrap()) < 1e-5);
    }

    #[test]
    fn no_positives_no_regression() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(&[2, 1]));
        let deltas = g.input(Tensor::zeros(&[2, 4]));
        let a = assign_targets(&[b(0.0, 10.0), b(20.0, 30.0)], &[], 0.7, 0.3);
        let l = loss(&mut g, logits, deltas, &a, &[0, 1]).unwrap().unwrap();
        assert!(l.reg.is_none());
        let ignored = Assignment { labels: vec![Label::Ignore; 2], ..a };
        assert!(loss(&mut g, logits, deltas, &ignored, &[0, 1]).unwrap().is_none());
    }

    #[test]
    fn sampling_respects_ratio() {
        let boxes: Vec<BBox> = (0..200).map(|i| b(i as f32, i as f32 + 10.0)).collect();
        let gt: Vec<BBox> = (0..40).map(|i| b(5.0 * i as f32, 5.0 * i as f32 + 10.0)).collect();
        let a = assign_targets(&boxes, &gt, 0.7, 0.3);
        let s = sample_targets(&a, 64, 0.25, &mut child_rng(0, 0));
        let pos = s.iter().filter(|&&i| a.labels[i] == Label::Positive).count();
        assert!(pos <= 16);
        assert!(s.len() <= 64);
        assert!(s.iter().all(|&i| a.labels[i] != Label::Ignore));
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_csv(&[TraceRow { iteration: 0, total: 1.5, cls: 1.0, reg: 0.5 }]);
        assert_eq!(csv, "iteration,total,cls,reg\n0,1.500000,1.000000,0.500000\n");
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { rpn_neg_iou: 0.8, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { head_neg_iou: 0.0, ..Default::default() }.validate().is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..100.0, 0.0f32..30.0, 1.0f32..40.0, 1.0f32..30.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn labels_agree_with_brute_force_iou(boxes in proptest::collection::vec(arb_box(), 1..30), gt in proptest::collection::vec(arb_box(), 0..5)) {
            let a = assign_targets(&boxes, &gt, 0.7, 0.3);
            let forced: Vec<usize> = gt
                .iter()
                .filter_map(|g| {
                    let mut best = (usize::MAX, 0.0);
                    for (i, bx) in boxes.iter().enumerate() {
                        let v = iou(bx, g);
                        if v > best.1 {
                            best = (i, v);
                        }
                    }
                    (best.0 != usize::MAX).then_some(best.0)
                })
                .collect();
            for (i, bx) in boxes.iter().enumerate() {
                let top = gt.iter().map(|g| iou(bx, g)).fold(0.0, f64::max);
                match a.labels[i] {
                    Label::Positive => prop_assert!(top >= 0.7 || forced.contains(&i)),
                    Label::Negative => prop_assert!(top <= 0.3 && !forced.contains(&i)),
                    Label::Ignore => prop_assert!(top > 0.3 && top < 0.7),
                }
            }
        }
    }
}
