//! Detection metrics, feature-space diagnostics, and plot emission.
//!
//! Inference scores a dense proposal grid with the active head, refines
//! boxes through the regression head, and applies per-class greedy NMS.
//! Average precision uses all-point interpolation (area under the monotone
//! precision envelope). The silhouette coefficient and the magnitude
//! statistics read the class-path and objectness-path feature vectors
//! respectively, matching what the probabilities themselves consume.

use std::collections::{BTreeMap, BTreeSet};
use std::cmp::Ordering;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, ClassId, Dataset, Label};
use crate::error::{Error, Result};
use crate::geometry::{decode_offsets, BoxF};
use crate::model::{roi_extract, DetectorModel};
use crate::plot::{self, Histogram};
use crate::scalar::Scalar;
use crate::train::ClassIndex;

/// Proposals with IoU under this bound against every ground-truth instance
/// (labeled or not) count as true background in diagnostics.
pub const BG_TRUE_MAX_IOU: f64 = 0.1;
/// True-background proposals sampled per image for diagnostics, taken in
/// grid order so the selection is deterministic.
pub const BG_TRUE_PER_IMAGE: usize = 8;
const HIST_BINS: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold for NMS suppression and for the headline AP matching.
    pub iou: f64,
    /// Detections scoring below this are dropped before NMS.
    pub score_floor: f64,
    /// Detections kept per image after merging classes.
    pub topk: usize,
    /// Proposal side lengths as fractions of the short image side.
    pub scales: Vec<f64>,
    /// Proposal aspect ratios (width / height).
    pub aspects: Vec<f64>,
    /// Grid step as a fraction of the proposal's short side.
    pub step_frac: f64,
    /// Refine grid boxes with the regression head before NMS.
    pub refine: bool,
    /// Also compute AP averaged over IoU 0.50:0.95 and AP at 0.75.
    pub coco_ap: bool,
    /// Compute the silhouette on raw feature vectors instead of f/|f|.
    /// The default angular form matches the claim under test: class
    /// identity lives in the feature direction, magnitude in objectness.
    pub raw_silhouette: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou: 0.5,
            score_floor: 0.05,
            topk: 100,
            scales: vec![0.18, 0.27, 0.40],
            aspects: vec![1.0],
            step_frac: 0.45,
            refine: true,
            coco_ap: true,
            raw_silhouette: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou > 0.0 && self.iou < 1.0) {
            return Err(Error::Config(format!(
                "eval.iou must lie in (0, 1), got {}",
                self.iou
            )));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!(
                "eval.score_floor must lie in [0, 1), got {}",
                self.score_floor
            )));
        }
        if self.topk == 0 {
            return Err(Error::Config("eval.topk must be at least 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(
                "eval.scales must be a non-empty list of fractions in (0, 1]".into(),
            ));
        }
        if self.aspects.is_empty() || self.aspects.iter().any(|&a| a <= 0.0) {
            return Err(Error::Config(
                "eval.aspects must be a non-empty list of positive ratios".into(),
            ));
        }
        if !(self.step_frac > 0.0 && self.step_frac <= 1.0) {
            return Err(Error::Config(format!(
                "eval.step_frac must lie in (0, 1], got {}",
                self.step_frac
            )));
        }
        Ok(())
    }
}

/// One post-NMS detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub bbox: BoxF,
    pub class_id: ClassId,
    /// Joint probability of the predicted class, in [0, 1].
    pub score: f64,
}

/// One ground-truth box for AP computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BoxF,
    pub class_id: ClassId,
}

/// Labeled ground-truth boxes of a dataset, in image order.
pub fn gt_boxes(dataset: &Dataset) -> Vec<GtBox> {
    let mut out = Vec::new();
    for image in &dataset.images {
        for inst in &image.instances {
            if let Label::Class(c) = inst.label {
                out.push(GtBox {
                    image_id: image.image_id.clone(),
                    bbox: inst.bbox,
                    class_id: c,
                });
            }
        }
    }
    out
}

/// Per-class average precision. `ap` is `None` when the class has no
/// ground truth, in which case it is excluded from every mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class AP at the headline IoU threshold.
    pub per_class: Vec<ClassAp>,
    /// Mean AP over novel classes at the headline threshold.
    pub nap50: Option<f64>,
    /// Mean AP over base classes at the headline threshold.
    pub bap50: Option<f64>,
    /// Novel mean AP averaged over IoU 0.50:0.05:0.95.
    pub nap5095: Option<f64>,
    /// Novel mean AP at IoU 0.75.
    pub nap75: Option<f64>,
    pub silhouette_base: Option<f64>,
    pub silhouette_all: Option<f64>,
    /// Classes excluded from the all-classes silhouette as singletons.
    pub silhouette_excluded: Vec<ClassId>,
    /// Known classes with zero ground-truth instances in the eval set.
    pub zero_gt_classes: Vec<ClassId>,
    pub n_images: usize,
    pub n_detections: usize,
}

/// Dense sliding proposal grid for one image, deterministic in
/// scale-major, aspect, row, column order. Boxes are kept inside the image
/// bounds; oversized combinations degrade to one centered box.
pub fn grid_proposals(width: usize, height: usize, cfg: &EvalConfig) -> Vec<BoxF> {
    let (w, h) = (width as f64, height as f64);
    let short = w.min(h);
    let mut out = Vec::new();
    for &scale in &cfg.scales {
        let side = scale * short;
        for &aspect in &cfg.aspects {
            let bw = (side * aspect.sqrt()).min(w);
            let bh = (side / aspect.sqrt()).min(h);
            let step = (cfg.step_frac * bw.min(bh)).max(1.0);
            for cy in centers(h, bh, step) {
                for cx in centers(w, bw, step) {
                    let b = BoxF::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0);
                    if b.is_valid() {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}

/// Center coordinates sweeping [side/2, extent - side/2] at `step`, with
/// the far end appended so the last stretch of the image is covered too.
fn centers(extent: f64, side: f64, step: f64) -> Vec<f64> {
    let lo = side / 2.0;
    let hi = extent - side / 2.0;
    if hi <= lo {
        return vec![extent / 2.0];
    }
    let mut cs = Vec::new();
    let mut c = lo;
    while c <= hi + 1e-9 {
        cs.push(c);
        c += step;
    }
    if hi - *cs.last().expect("at least lo") > 1e-9 {
        cs.push(hi);
    }
    cs
}

/// Greedy non-maximum suppression: visit candidates by descending score
/// (ties by index) and keep those overlapping every kept box below
/// `iou_thresh`. Returns kept indices in visit order.
pub fn greedy_nms(cands: &[(BoxF, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .1
            .partial_cmp(&cands[a].1)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'next: for &i in &order {
        for &k in &kept {
            if cands[k].0.iou(&cands[i].0) >= iou_thresh {
                continue 'next;
            }
        }
        kept.push(i);
    }
    kept
}

fn det_order(a: &DetectionResult, b: &DetectionResult) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap_or(Ordering::Equal))
        .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap_or(Ordering::Equal))
}

/// Score the proposal grid on every image and return per-class NMS
/// survivors, at most `topk` per image. Deterministic: no randomness, and
/// images are visited in dataset order.
pub fn run_inference<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &Dataset,
    class_index: &ClassIndex,
    cfg: &EvalConfig,
) -> Result<Vec<DetectionResult>> {
    cfg.validate()?;
    if class_index.len() != model.head.n_classes {
        return Err(Error::Config(format!(
            "class index has {} entries but the head scores {} classes",
            class_index.len(),
            model.head.n_classes
        )));
    }
    let mut all = Vec::new();
    for image in &dataset.images {
        all.extend(infer_image(model, image, class_index, cfg)?);
    }
    Ok(all)
}

fn infer_image<S: Scalar>(
    model: &DetectorModel<S>,
    image: &AnnotatedImage,
    class_index: &ClassIndex,
    cfg: &EvalConfig,
) -> Result<Vec<DetectionResult>> {
    let (w, h) = (image.width(), image.height());
    let anchors = grid_proposals(w, h, cfg);
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    let (features, _) = model.features(image);
    let rois: Vec<(usize, BoxF)> = anchors.iter().map(|b| (0, *b)).collect();
    let (tv, _) = model.forward_proposals(&features, &rois)?;

    let n_classes = model.head.n_classes;
    let mut per_class: Vec<Vec<(BoxF, f64)>> = vec![Vec::new(); n_classes];
    for (p, anchor) in anchors.iter().enumerate() {
        let scores = model.head.scores(&tv.f_cls.row(p), &tv.f_obj.row(p))?;
        for (c, cands) in per_class.iter_mut().enumerate() {
            let score = scores[c].to_f64_lossy();
            if score < cfg.score_floor {
                continue;
            }
            let bbox = if cfg.refine {
                let t = model.reg_head.deltas_for(&tv.f_reg.view(), p, c);
                let (decoded, clamped) = decode_offsets(anchor, &t);
                // A degenerate decode means the regression output is garbage
                // for this proposal; the unrefined anchor is still a valid
                // candidate, so keep it rather than dropping the detection.
                if clamped {
                    *anchor
                } else {
                    decoded.clip(w as f64, h as f64)
                }
            } else {
                *anchor
            };
            if !bbox.is_valid() {
                continue;
            }
            cands.push((bbox, score));
        }
    }

    let mut merged = Vec::new();
    for (col, cands) in per_class.iter().enumerate() {
        let class_id = class_index.class_at(col);
        for &i in &greedy_nms(cands, cfg.iou) {
            merged.push(DetectionResult {
                image_id: image.image_id.clone(),
                bbox: cands[i].0,
                class_id,
                score: cands[i].1,
            });
        }
    }
    merged.sort_by(det_order);
    merged.truncate(cfg.topk);
    Ok(merged)
}

/// Per-class AP at `iou_thresh` over the union of classes present in the
/// detections and the ground truth. Matching is greedy by descending
/// score: each detection takes the unmatched ground-truth box with the
/// highest IoU at or above the threshold, each box matches once.
pub fn average_precision(
    dets: &[DetectionResult],
    gt: &[GtBox],
    iou_thresh: f64,
) -> Vec<ClassAp> {
    let classes: BTreeSet<ClassId> = dets
        .iter()
        .map(|d| d.class_id)
        .chain(gt.iter().map(|g| g.class_id))
        .collect();
    classes
        .into_iter()
        .map(|c| class_ap(dets, gt, c, iou_thresh))
        .collect()
}

fn class_ap(dets: &[DetectionResult], gt: &[GtBox], class: ClassId, iou_thresh: f64) -> ClassAp {
    let mut gt_by_image: BTreeMap<&str, Vec<(BoxF, bool)>> = BTreeMap::new();
    let mut n_gt = 0usize;
    for g in gt.iter().filter(|g| g.class_id == class) {
        gt_by_image
            .entry(g.image_id.as_str())
            .or_default()
            .push((g.bbox, false));
        n_gt += 1;
    }
    let mut ds: Vec<&DetectionResult> = dets.iter().filter(|d| d.class_id == class).collect();
    ds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap_or(Ordering::Equal))
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap_or(Ordering::Equal))
    });
    let n_det = ds.len();
    if n_gt == 0 {
        return ClassAp {
            class_id: class,
            ap: None,
            n_gt,
            n_det,
        };
    }
    let mut tp = Vec::with_capacity(ds.len());
    for d in &ds {
        let mut best: Option<(usize, f64)> = None;
        if let Some(boxes) = gt_by_image.get(d.image_id.as_str()) {
            for (i, (b, matched)) in boxes.iter().enumerate() {
                if *matched {
                    continue;
                }
                let iou = d.bbox.iou(b);
                if iou >= iou_thresh && best.map_or(true, |(_, bi)| iou > bi) {
                    best = Some((i, iou));
                }
            }
        }
        match best {
            Some((i, _)) => {
                gt_by_image.get_mut(d.image_id.as_str()).expect("seen")[i].1 = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    ClassAp {
        class_id: class,
        ap: Some(ap_from_matches(&tp, n_gt)),
        n_gt,
        n_det,
    }
}

/// Area under the precision-recall curve with the precision envelope made
/// monotonically non-increasing (all-point interpolation). `tp[i]` is the
/// match outcome of the i-th detection in score order.
fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    let n = tp.len();
    let mut precision = vec![0.0f64; n];
    let mut recall = vec![0.0f64; n];
    let mut hits = 0usize;
    for i in 0..n {
        if tp[i] {
            hits += 1;
        }
        precision[i] = hits as f64 / (i + 1) as f64;
        recall[i] = hits as f64 / n_gt as f64;
    }
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..n {
        ap += (recall[i] - prev) * envelope[i];
        prev = recall[i];
    }
    ap
}

/// Silhouette coefficient outcome. Classes with a single sample are
/// excluded rather than fatal; `sc` averages over the remaining samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub sc: f64,
    pub n_samples: usize,
    pub excluded_classes: Vec<ClassId>,
}

/// Mean over samples of (b - a) / max(a, b) with Euclidean distances,
/// where `a` is the mean intra-class distance (excluding self) and `b` the
/// smallest mean distance to any other class. A sample with a = b = 0
/// contributes 0 by convention.
pub fn silhouette(points: &[(Vec<f64>, ClassId)]) -> Result<Silhouette> {
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, (_, c)) in points.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    let excluded_classes: Vec<ClassId> = by_class
        .iter()
        .filter(|(_, m)| m.len() < 2)
        .map(|(c, _)| *c)
        .collect();
    by_class.retain(|_, m| m.len() >= 2);
    if by_class.len() < 2 {
        return Err(Error::Degenerate(format!(
            "silhouette needs at least two classes with two or more samples; {} remain",
            by_class.len()
        )));
    }
    if let Some(dim) = points.first().map(|(v, _)| v.len()) {
        if points.iter().any(|(v, _)| v.len() != dim) {
            return Err(Error::Shape(
                "silhouette points must share one dimensionality".into(),
            ));
        }
    }
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .0
            .iter()
            .zip(&points[j].0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mean_dist = |i: usize, members: &[usize]| -> f64 {
        let others: Vec<f64> = members.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).collect();
        others.iter().sum::<f64>() / others.len() as f64
    };
    let mut sum = 0.0;
    let mut n_samples = 0usize;
    for (&c, members) in &by_class {
        for &i in members {
            let a = mean_dist(i, members);
            let b = by_class
                .iter()
                .filter(|(&c2, _)| c2 != c)
                .map(|(_, m2)| mean_dist(i, m2))
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            sum += if denom == 0.0 { 0.0 } else { (b - a) / denom };
            n_samples += 1;
        }
    }
    Ok(Silhouette {
        sc: sum / n_samples as f64,
        n_samples,
        excluded_classes,
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Class-path feature vectors of every labeled ground-truth box, one pass
/// per image. Angularly normalized unless `cfg.raw_silhouette` is set.
pub fn gt_class_features<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<(Vec<f64>, ClassId)>> {
    let mut out = Vec::new();
    for image in &dataset.images {
        let (w, h) = (image.width() as f64, image.height() as f64);
        let boxes: Vec<(BoxF, ClassId)> = image
            .instances
            .iter()
            .filter_map(|inst| match inst.label {
                Label::Class(c) => {
                    let b = inst.bbox.clip(w, h);
                    b.is_valid().then_some((b, c))
                }
                Label::Unlabeled { .. } => None,
            })
            .collect();
        if boxes.is_empty() {
            continue;
        }
        let (features, _) = model.features(image);
        let rois: Vec<(usize, BoxF)> = boxes.iter().map(|(b, _)| (0, *b)).collect();
        let (tv, _) = model.forward_proposals(&features, &rois)?;
        for (i, &(_, c)) in boxes.iter().enumerate() {
            let f: Vec<f64> = tv.f_cls.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            let f = if cfg.raw_silhouette { f } else { normalize(f) };
            out.push((f, c));
        }
    }
    Ok(out)
}

fn silhouette_or_none(points: &[(Vec<f64>, ClassId)]) -> (Option<f64>, Vec<ClassId>) {
    match silhouette(points) {
        Ok(s) => (Some(s.sc), s.excluded_classes),
        Err(_) => (None, Vec::new()),
    }
}

fn mean_ap<F: Fn(ClassId) -> bool>(entries: &[ClassAp], keep: F) -> Option<f64> {
    let vals: Vec<f64> = entries
        .iter()
        .filter(|e| keep(e.class_id))
        .filter_map(|e| e.ap)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Full evaluation: inference, AP at the headline threshold (plus the
/// COCO-style sweep when enabled), and silhouette over ground-truth
/// features for base classes and for all classes.
pub fn evaluate<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &Dataset,
    novel: &BTreeSet<ClassId>,
    class_index: &ClassIndex,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<DetectionResult>)> {
    let dets = run_inference(model, dataset, class_index, cfg)?;
    let gts = gt_boxes(dataset);

    let mut per_class = average_precision(&dets, &gts, cfg.iou);
    for c in &class_index.order {
        if !per_class.iter().any(|e| e.class_id == *c) {
            per_class.push(ClassAp {
                class_id: *c,
                ap: None,
                n_gt: 0,
                n_det: 0,
            });
        }
    }
    per_class.sort_by_key(|e| e.class_id);

    let is_novel = |c: ClassId| novel.contains(&c);
    let nap50 = mean_ap(&per_class, is_novel);
    let bap50 = mean_ap(&per_class, |c| !is_novel(c));
    let (nap5095, nap75) = if cfg.coco_ap {
        let mut sweep = Vec::new();
        let mut at75 = None;
        for i in 0..10 {
            let thresh = 0.5 + 0.05 * i as f64;
            let entries = average_precision(&dets, &gts, thresh);
            let nap = mean_ap(&entries, is_novel);
            if i == 5 {
                at75 = nap;
            }
            if let Some(v) = nap {
                sweep.push(v);
            }
        }
        let mean = (!sweep.is_empty()).then(|| sweep.iter().sum::<f64>() / sweep.len() as f64);
        (mean, at75)
    } else {
        (None, None)
    };

    let points = gt_class_features(model, dataset, cfg)?;
    let base_points: Vec<(Vec<f64>, ClassId)> = points
        .iter()
        .filter(|(_, c)| !is_novel(*c))
        .cloned()
        .collect();
    let (silhouette_base, _) = silhouette_or_none(&base_points);
    let (silhouette_all, silhouette_excluded) = silhouette_or_none(&points);

    let gt_classes: BTreeSet<ClassId> = gts.iter().map(|g| g.class_id).collect();
    let zero_gt_classes: Vec<ClassId> = class_index
        .order
        .iter()
        .copied()
        .filter(|c| !gt_classes.contains(c))
        .collect();

    let report = EvalReport {
        n_detections: dets.len(),
        n_images: dataset.images.len(),
        per_class,
        nap50,
        bap50,
        nap5095,
        nap75,
        silhouette_base,
        silhouette_all,
        silhouette_excluded,
        zero_gt_classes,
    };
    Ok((report, dets))
}

/// Summary statistics plus the shared-range histogram of one sample group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

fn group_stats(group: &str, values: &[f64], range: (f64, f64)) -> GroupStats {
    let n = values.len();
    let mean = if n == 0 {
        0.0
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let var = if n == 0 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
    };
    GroupStats {
        group: group.to_string(),
        n,
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        histogram: Histogram::build(values, HIST_BINS, range),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Objectness-path magnitude statistics in fixed group order:
    /// fg_base, fg_novel, bg_true, bg_unlabeled_instance.
    pub magnitude: Vec<GroupStats>,
    /// Cosine between each labeled box's class-path feature and its class
    /// prototype column.
    pub cosine_to_prototype: Option<GroupStats>,
    pub silhouette_base: Option<f64>,
    pub silhouette_all: Option<f64>,
    pub silhouette_excluded: Vec<ClassId>,
    /// True when every rendered attention value stayed strictly inside
    /// (0, 1), the open range of the sigmoid.
    pub heatmap_range_ok: bool,
    /// File names of the emitted PNG plots, relative to the output
    /// directory.
    pub plots: Vec<String>,
}

const MAGNITUDE_GROUPS: [&str; 4] = ["fg_base", "fg_novel", "bg_true", "bg_unlabeled_instance"];

/// Feature-space diagnostics: magnitude statistics per ground-truth group,
/// prototype-cosine distribution, silhouette table, and attention heatmap
/// overlays. PNG plots land in `out_dir`; the numeric content is the
/// returned report, which callers serialize next to them.
pub fn diagnostics<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &Dataset,
    novel: &BTreeSet<ClassId>,
    class_index: &ClassIndex,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut magnitudes: [Vec<f64>; 4] = Default::default();
    let mut cosines: Vec<f64> = Vec::new();
    let mut sil_points: Vec<(Vec<f64>, ClassId)> = Vec::new();

    for image in &dataset.images {
        let (w, h) = (image.width() as f64, image.height() as f64);
        // Group every box first, then run one forward pass per image.
        let mut boxes: Vec<(BoxF, usize, Option<ClassId>)> = Vec::new();
        let mut instance_boxes: Vec<BoxF> = Vec::new();
        for inst in &image.instances {
            let b = inst.bbox.clip(w, h);
            if !b.is_valid() {
                continue;
            }
            instance_boxes.push(b);
            match inst.label {
                Label::Class(c) if novel.contains(&c) => boxes.push((b, 1, Some(c))),
                Label::Class(c) => boxes.push((b, 0, Some(c))),
                Label::Unlabeled { .. } => boxes.push((b, 3, None)),
            }
        }
        let mut bg_taken = 0usize;
        for cand in grid_proposals(image.width(), image.height(), cfg) {
            if bg_taken >= BG_TRUE_PER_IMAGE {
                break;
            }
            if instance_boxes.iter().all(|b| b.iou(&cand) < BG_TRUE_MAX_IOU) {
                boxes.push((cand, 2, None));
                bg_taken += 1;
            }
        }
        if boxes.is_empty() {
            continue;
        }
        let (features, _) = model.features(image);
        let rois: Vec<(usize, BoxF)> = boxes.iter().map(|(b, _, _)| (0, *b)).collect();
        let (tv, _) = model.forward_proposals(&features, &rois)?;
        for (i, &(_, group, class)) in boxes.iter().enumerate() {
            let mag = tv
                .f_obj
                .row(i)
                .iter()
                .map(|v| {
                    let x = v.to_f64_lossy();
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            magnitudes[group].push(mag);
            if let Some(c) = class {
                let f: Vec<f64> = tv.f_cls.row(i).iter().map(|v| v.to_f64_lossy()).collect();
                if let Ok(col) = class_index.col(c) {
                    cosines.push(cosine_to_column(model, &f, col));
                }
                sil_points.push((
                    if cfg.raw_silhouette {
                        f
                    } else {
                        normalize(f)
                    },
                    c,
                ));
            }
        }
    }

    let range = plot::shared_range(magnitudes.iter().map(|v| v.as_slice()));
    let mut plots = Vec::new();
    let magnitude: Vec<GroupStats> = MAGNITUDE_GROUPS
        .iter()
        .zip(&magnitudes)
        .map(|(name, values)| group_stats(name, values, range))
        .collect();
    let palette: [[u8; 3]; 4] = [[60, 120, 60], [60, 60, 200], [120, 120, 120], [200, 120, 40]];
    for (stats, color) in magnitude.iter().zip(palette) {
        let file = format!("magnitude_{}.png", stats.group);
        plot::save_histogram(&out_dir.join(&file), &stats.histogram, color)?;
        plots.push(file);
    }

    let cosine_to_prototype = (!cosines.is_empty()).then(|| {
        let stats = group_stats("cosine_to_prototype", &cosines, (-1.0, 1.0));
        stats
    });
    if let Some(stats) = &cosine_to_prototype {
        let file = "cosine_to_prototype.png".to_string();
        plot::save_histogram(&out_dir.join(&file), &stats.histogram, [90, 60, 160])?;
        plots.push(file);
    }

    let base_points: Vec<(Vec<f64>, ClassId)> = sil_points
        .iter()
        .filter(|(_, c)| !novel.contains(c))
        .cloned()
        .collect();
    let (silhouette_base, _) = silhouette_or_none(&base_points);
    let (silhouette_all, silhouette_excluded) = silhouette_or_none(&sil_points);

    let heatmap_range_ok = render_attention_overlays(model, dataset, out_dir, &mut plots)?;

    Ok(DiagnosticsReport {
        magnitude,
        cosine_to_prototype,
        silhouette_base,
        silhouette_all,
        silhouette_excluded,
        heatmap_range_ok,
        plots,
    })
}

fn cosine_to_column<S: Scalar>(model: &DetectorModel<S>, f: &[f64], col: usize) -> f64 {
    let w = model.head.w_cls.column(col);
    let mut dot = 0.0;
    let mut nf = 0.0;
    let mut nw = 0.0;
    for (a, b) in f.iter().zip(w.iter()) {
        let bw = b.to_f64_lossy();
        dot += a * bw;
        nf += a * a;
        nw += bw * bw;
    }
    let denom = nf.sqrt() * nw.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Overlay the per-task sigmoid attention maps on sample proposals of the
/// first image carrying labeled instances. One PNG per active mask; each
/// labeled box is tinted by its ROI attention values. Returns whether all
/// rendered values stayed strictly inside (0, 1).
fn render_attention_overlays<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &Dataset,
    out_dir: &Path,
    plots: &mut Vec<String>,
) -> Result<bool> {
    const MAX_PROPOSALS: usize = 4;
    let Some(image) = dataset
        .images
        .iter()
        .find(|im| im.instances.iter().any(|i| i.label.is_labeled()))
    else {
        return Ok(true);
    };
    let (w, h) = (image.width() as f64, image.height() as f64);
    let boxes: Vec<BoxF> = image
        .instances
        .iter()
        .filter(|i| i.label.is_labeled())
        .map(|i| i.bbox.clip(w, h))
        .filter(BoxF::is_valid)
        .take(MAX_PROPOSALS)
        .collect();
    if boxes.is_empty() {
        return Ok(true);
    }
    let (features, _) = model.features(image);
    let rois: Vec<(usize, BoxF)> = boxes.iter().map(|b| (0, *b)).collect();
    let (roi_tensor, _) = roi_extract(
        &features,
        &rois,
        model.config.stride(),
        model.config.roi_grid,
    )?;
    let grid = model.config.roi_grid;
    let mut range_ok = true;
    for (name, mask) in model.sada.attention_maps(&roi_tensor) {
        let mut img = grayscale_backdrop(image);
        for (p, b) in boxes.iter().enumerate() {
            let (x1, y1) = (b.x1.max(0.0) as u32, b.y1.max(0.0) as u32);
            let (x2, y2) = ((b.x2.min(w)).ceil() as u32, (b.y2.min(h)).ceil() as u32);
            for y in y1..y2.min(image.height() as u32) {
                for x in x1..x2.min(image.width() as u32) {
                    let gx = (((x as f64 + 0.5 - b.x1) / b.width()) * grid as f64)
                        .floor()
                        .clamp(0.0, (grid - 1) as f64) as usize;
                    let gy = (((y as f64 + 0.5 - b.y1) / b.height()) * grid as f64)
                        .floor()
                        .clamp(0.0, (grid - 1) as f64) as usize;
                    let v = mask[[p, 0, gy, gx]].to_f64_lossy();
                    range_ok &= v > 0.0 && v < 1.0;
                    let px = img.get_pixel_mut(x, y);
                    let gray = px.0[0] as f64;
                    px.0 = [
                        (0.45 * gray + 0.55 * 255.0 * v).round() as u8,
                        (0.45 * gray).round() as u8,
                        (0.45 * gray + 0.55 * 255.0 * (1.0 - v)).round() as u8,
                    ];
                }
            }
        }
        let file = format!("attention_{name}.png");
        plot::save_rgb(&out_dir.join(&file), &img)?;
        plots.push(file);
    }
    Ok(range_ok)
}

fn grayscale_backdrop(image: &AnnotatedImage) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = &image.pixels;
            let gray = (u16::from(px[[y, x, 0]]) + u16::from(px[[y, x, 1]]) + u16::from(px[[y, x, 2]]))
                / 3;
            img.put_pixel(x as u32, y as u32, Rgb([gray as u8; 3]));
        }
    }
    img
}
