//! Segmentation metrics — panoptic quality with thing/stuff splits, mean
//! IoU, COCO-style instance AP — and a closed-form multiply-accumulate
//! model of the encoder for efficiency comparisons.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::PanopticMap;
use crate::vit::ViTConfig;

/// Match threshold for panoptic segment pairs; IoU above this is unique.
pub const PQ_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PQStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PQStats {
    pub fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn pq(&self) -> f64 {
        let d = self.denom();
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.denom();
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }
}

#[derive(Debug, Clone)]
pub struct PQReport {
    /// category -> (is_thing, stats)
    pub per_category: BTreeMap<usize, (bool, PQStats)>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
}

fn mean<I: Iterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Panoptic quality between two segment-id maps. Segments match when they
/// share a category and their IoU exceeds 0.5 (which makes matches unique).
/// Void pixels (id 0) are excluded: a predicted segment's overlap with GT
/// void is removed from the union, and unmatched predictions that are
/// mostly void are not counted as false positives.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap) -> Result<PQReport> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape("panoptic maps disagree on H x W".into()));
    }
    pred.validate()?;
    gt.validate()?;

    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
        *inter.entry((g, p)).or_default() += 1;
    }
    let mut gt_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, usize> = BTreeMap::new();
    for &g in &gt.ids {
        *gt_area.entry(g).or_default() += 1;
    }
    for &p in &pred.ids {
        *pred_area.entry(p).or_default() += 1;
    }

    let mut per_category: BTreeMap<usize, (bool, PQStats)> = BTreeMap::new();
    let mut flag = |cat: usize, is_thing: bool| -> Result<()> {
        let e = per_category.entry(cat).or_insert((is_thing, PQStats::default()));
        if e.0 != is_thing {
            return Err(Error::Invalid(format!(
                "category {cat} is thing in one map and stuff in the other"
            )));
        }
        Ok(())
    };
    for s in &gt.segments {
        flag(s.category, s.is_thing)?;
    }
    for s in &pred.segments {
        flag(s.category, s.is_thing)?;
    }

    let mut gt_matched = vec![false; gt.segments.len()];
    let mut pred_matched = vec![false; pred.segments.len()];
    for (&(gid, pid), &i) in &inter {
        if gid == 0 || pid == 0 {
            continue;
        }
        let gseg = &gt.segments[(gid - 1) as usize];
        let pseg = &pred.segments[(pid - 1) as usize];
        if gseg.category != pseg.category {
            continue;
        }
        let void_overlap = *inter.get(&(0, pid)).unwrap_or(&0);
        let union = gt_area[&gid] + pred_area[&pid] - i - void_overlap;
        let iou = i as f64 / union as f64;
        if iou > PQ_MATCH_IOU {
            gt_matched[(gid - 1) as usize] = true;
            pred_matched[(pid - 1) as usize] = true;
            let stats = &mut per_category.get_mut(&gseg.category).unwrap().1;
            stats.tp += 1;
            stats.iou_sum += iou;
        }
    }
    for (si, seg) in gt.segments.iter().enumerate() {
        if !gt_matched[si] {
            per_category.get_mut(&seg.category).unwrap().1.fn_ += 1;
        }
    }
    for (si, seg) in pred.segments.iter().enumerate() {
        if pred_matched[si] {
            continue;
        }
        let pid = (si + 1) as u32;
        let area = pred_area.get(&pid).copied().unwrap_or(0);
        let void_overlap = *inter.get(&(0, pid)).unwrap_or(&0);
        // mostly-void predictions are exempt from the FP count
        if 2 * void_overlap > area {
            continue;
        }
        per_category.get_mut(&seg.category).unwrap().1.fp += 1;
    }

    Ok(summarize(per_category))
}

fn summarize(per_category: BTreeMap<usize, (bool, PQStats)>) -> PQReport {
    let active = |s: &PQStats| s.tp + s.fp + s.fn_ > 0;
    let pq = mean(per_category.values().filter(|(_, s)| active(s)).map(|(_, s)| s.pq()));
    let sq = mean(per_category.values().filter(|(_, s)| active(s)).map(|(_, s)| s.sq()));
    let rq = mean(per_category.values().filter(|(_, s)| active(s)).map(|(_, s)| s.rq()));
    let pq_things = mean(
        per_category
            .values()
            .filter(|(t, s)| *t && active(s))
            .map(|(_, s)| s.pq()),
    );
    let pq_stuff = mean(
        per_category
            .values()
            .filter(|(t, s)| !*t && active(s))
            .map(|(_, s)| s.pq()),
    );
    PQReport {
        per_category,
        pq,
        sq,
        rq,
        pq_things,
        pq_stuff,
    }
}

/// PQ over a whole dataset: per-category match statistics are summed
/// across (pred, gt) pairs before the per-category averages are taken.
pub fn panoptic_quality_dataset(pairs: &[(&PanopticMap, &PanopticMap)]) -> Result<PQReport> {
    let mut merged: BTreeMap<usize, (bool, PQStats)> = BTreeMap::new();
    for (pred, gt) in pairs {
        let report = panoptic_quality(pred, gt)?;
        for (cat, (is_thing, stats)) in report.per_category {
            let e = merged.entry(cat).or_insert((is_thing, PQStats::default()));
            if e.0 != is_thing {
                return Err(Error::Invalid(format!(
                    "category {cat} is thing in one sample and stuff in another"
                )));
            }
            e.1.tp += stats.tp;
            e.1.fp += stats.fp;
            e.1.fn_ += stats.fn_;
            e.1.iou_sum += stats.iou_sum;
        }
    }
    Ok(summarize(merged))
}

/// Mean IoU over categories present in the ground truth; label -1 marks
/// ignored (void) pixels. Also returns per-category IoU where defined.
pub fn miou(pred: &[i64], gt: &[i64], categories: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape("semantic maps disagree on length".into()));
    }
    let mut inter = vec![0usize; categories];
    let mut pred_count = vec![0usize; categories];
    let mut gt_count = vec![0usize; categories];
    for (&p, &g) in pred.iter().zip(gt) {
        if g < 0 {
            continue;
        }
        let g = g as usize;
        if g >= categories {
            return Err(Error::Invalid(format!("gt label {g} >= C={categories}")));
        }
        gt_count[g] += 1;
        if p >= 0 {
            let p = p as usize;
            if p >= categories {
                return Err(Error::Invalid(format!("pred label {p} >= C={categories}")));
            }
            pred_count[p] += 1;
            if p == g {
                inter[g] += 1;
            }
        }
    }
    let mut per = vec![None; categories];
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..categories {
        if gt_count[c] == 0 {
            continue;
        }
        let union = gt_count[c] + pred_count[c] - inter[c];
        let iou = inter[c] as f64 / union as f64;
        per[c] = Some(iou);
        sum += iou;
        n += 1;
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok((mean, per))
}

#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub mask: Vec<bool>,
    pub category: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct InstanceGt {
    pub mask: Vec<bool>,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average precision for one category at one IoU threshold, 101-point
/// interpolated. Predictions must already be sorted by descending
/// confidence.
fn ap_single(preds: &[&InstancePrediction], gts: &[&InstanceGt], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut claimed = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best = (0.0, usize::MAX);
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let iou = mask_iou(&p.mask, &g.mask);
            if iou >= thr && iou > best.0 {
                best = (iou, gi);
            }
        }
        if best.1 != usize::MAX {
            claimed[best.1] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    // precision/recall curve, then 101-point interpolation
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(preds.len()); // (recall, precision)
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0_f64, f64::max);
        total += best;
    }
    total / 101.0
}

/// COCO-style mask AP: averaged over IoU thresholds 0.50:0.05:0.95 and over
/// categories that have ground truth instances; AP50/AP75 at the single
/// thresholds.
pub fn instance_ap(
    preds: &[InstancePrediction],
    gts: &[InstanceGt],
    categories: usize,
) -> Result<ApReport> {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut per_threshold = vec![Vec::new(); thresholds.len()]; // per-category APs
    let mut any_gt = false;
    for c in 0..categories {
        let cgts: Vec<&InstanceGt> = gts.iter().filter(|g| g.category == c).collect();
        if cgts.is_empty() {
            continue;
        }
        any_gt = true;
        let cpreds: Vec<&InstancePrediction> = order
            .iter()
            .map(|&i| &preds[i])
            .filter(|p| p.category == c)
            .collect();
        for (ti, &thr) in thresholds.iter().enumerate() {
            per_threshold[ti].push(ap_single(&cpreds, &cgts, thr));
        }
    }
    if !any_gt {
        return Err(Error::Invalid("instance_ap needs at least one gt".into()));
    }
    let at = |ti: usize| mean(per_threshold[ti].iter().copied());
    let ap = mean((0..thresholds.len()).map(at));
    Ok(ApReport {
        ap,
        ap50: at(0),
        ap75: at(5),
    })
}

// ---- analytic cost model ---------------------------------------------------

/// One fused multiply-accumulate is counted as one FLOP; softmax, norms,
/// and activations are ignored as non-dominant.
pub const FLOPS_PER_MAC: f64 = 1.0;

/// Per-stage multiply-accumulate counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub patch_embed: f64,
    pub attn_projections: f64,
    pub attn_logits_values: f64,
    pub mlp: f64,
    pub rma_extra: f64,
    pub projection: f64,
    pub total_macs: f64,
    pub total_flops: f64,
}

impl FlopsEstimate {
    fn from_stages(
        patch_embed: f64,
        attn_projections: f64,
        attn_logits_values: f64,
        mlp: f64,
        rma_extra: f64,
        projection: f64,
    ) -> Self {
        let total_macs =
            patch_embed + attn_projections + attn_logits_values + mlp + rma_extra + projection;
        FlopsEstimate {
            patch_embed,
            attn_projections,
            attn_logits_values,
            mlp,
            rma_extra,
            projection,
            total_macs,
            total_flops: total_macs * FLOPS_PER_MAC,
        }
    }

    pub fn tflops(&self) -> f64 {
        self.total_flops / 1e12
    }
}

/// Closed-form cost of one joint forward pass with M mask tokens and the
/// given relative-attention layer set.
pub fn flops_forward(config: &ViTConfig, m: usize, rma_layers: &[usize]) -> FlopsEstimate {
    let n = config.n_patches() as f64;
    let d = config.dim as f64;
    let p = config.patch_size as f64;
    let t = n + 1.0 + m as f64;
    let depth = config.depth as f64;
    let mlp_dim = (config.mlp_ratio * config.dim) as f64;
    let hpix = (config.image_size * config.image_size) as f64;
    let mf = m as f64;

    let patch_embed = n * d * 3.0 * p * p;
    let attn_projections = depth * 4.0 * t * d * d;
    let attn_logits_values = depth * 2.0 * t * t * d;
    let mlp = depth * 2.0 * t * d * mlp_dim;
    let projection = (1.0 + mf) * d * config.out_dim as f64;

    let mut rma_extra = 0.0;
    for _ in rma_layers {
        // f2 patchify of every mask
        rma_extra += mf * n * d * p * p;
        // relative query/key projections and the per-token dot product
        rma_extra += mf * n * d * d; // query side, one per (mask, patch)
        rma_extra += n * d * d; // key side, broadcast over masks
        rma_extra += mf * n * d; // channel-sum product
        // refinement head over the patch grid
        rma_extra += mf * n * d; // query/key elementwise product
        rma_extra += mf * n * (d / 2.0) * d * 9.0; // first 3x3 conv
        rma_extra += mf * n * (d / 2.0) * 9.0; // second 3x3 conv
        rma_extra += mf * hpix * 4.0; // bilinear upsample
    }
    FlopsEstimate::from_stages(
        patch_embed,
        attn_projections,
        attn_logits_values,
        mlp,
        rma_extra,
        projection,
    )
}

/// Crop-and-encode baseline: M independent full passes without mask tokens.
pub fn flops_baseline(config: &ViTConfig, m: usize) -> FlopsEstimate {
    let single = flops_forward(config, 0, &[]);
    FlopsEstimate::from_stages(
        single.patch_embed * m as f64,
        single.attn_projections * m as f64,
        single.attn_logits_values * m as f64,
        single.mlp * m as f64,
        0.0,
        single.projection * m as f64,
    )
}

/// ViT-L/14-like reference geometry at 640x640 input.
pub fn vit_l14_640() -> ViTConfig {
    ViTConfig {
        image_size: 630, // 45 x 45 patch grid at patch 14
        patch_size: 14,
        depth: 24,
        dim: 1024,
        heads: 16,
        mlp_ratio: 4,
        out_dim: 768,
    }
}

/// The JSON metrics report with fixed key names.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub tflops: f64,
}
