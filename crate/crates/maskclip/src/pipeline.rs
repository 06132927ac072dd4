//! End-to-end segmentation plumbing: classifying mask features against an
//! embedding table, the crop-and-encode baseline that runs the full encoder
//! once per mask, a synthetic connected-component mask proposer, and greedy
//! panoptic merging.

use crate::error::{Error, Result};
use crate::mask_tokens::{MaskSet, DEFAULT_THRESHOLD};
use crate::tensor::Tensor;
use crate::vit::{encode, FrozenWeights};

/// CLIP-convention logit scale.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// Minimum segment/proposal area in pixels.
pub const DEFAULT_MIN_AREA: usize = 16;

/// Foreground quantile for the synthetic proposer.
pub const DEFAULT_PROPOSAL_QUANTILE: f64 = 0.75;

/// One category: a text label, a thing/stuff flag, and a unit-norm
/// embedding vector standing in for the CLIP text embedding.
#[derive(Debug, Clone)]
pub struct TableEntry {
    pub name: String,
    pub is_thing: bool,
    pub vector: Vec<f64>,
}

/// The category embedding table. Names are unique and vectors unit-norm.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    entries: Vec<TableEntry>,
}

impl EmbeddingTable {
    pub fn new(entries: Vec<TableEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("embedding table is empty".into()));
        }
        let dim = entries[0].vector.len();
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "table entry {} has width {}, expected {dim}",
                    e.name,
                    e.vector.len()
                )));
            }
            let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "table entry {} has norm {norm}, expected 1",
                    e.name
                )));
            }
            for prev in &entries[..i] {
                if prev.name == e.name {
                    return Err(Error::Invalid(format!("duplicate table name {}", e.name)));
                }
            }
        }
        Ok(EmbeddingTable { entries })
    }

    /// Build a table from raw vectors, L2-normalizing each.
    pub fn normalized(mut entries: Vec<TableEntry>) -> Result<Self> {
        for e in &mut entries {
            let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Invalid(format!("table entry {} is all-zero", e.name)));
            }
            for v in &mut e.vector {
                *v /= norm;
            }
        }
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries[0].vector.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// One classified mask: soft mask, per-category softmax scores, argmax
/// category, and the argmax score as confidence.
#[derive(Debug, Clone)]
pub struct SegmentPrediction {
    pub mask: Tensor,
    pub scores: Vec<f64>,
    pub category: usize,
    pub confidence: f64,
}

impl SegmentPrediction {
    pub fn from_scores(mask: Tensor, scores: Vec<f64>) -> Result<Self> {
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("scores sum to {sum}, expected 1")));
        }
        let (category, &confidence) = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .ok_or_else(|| Error::Invalid("empty score row".into()))?;
        Ok(SegmentPrediction {
            mask,
            scores,
            category,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticSegment {
    pub category: usize,
    pub is_thing: bool,
    pub confidence: f64,
}

/// Non-overlapping segment-id map; id 0 is void, segment ids are contiguous
/// from 1 and index `segments` at id-1.
#[derive(Debug, Clone)]
pub struct PanopticMap {
    pub ids: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub segments: Vec<PanopticSegment>,
}

impl PanopticMap {
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.height * self.width {
            return Err(Error::Shape("panoptic id buffer size mismatch".into()));
        }
        let n = self.segments.len() as u32;
        let mut seen = vec![false; self.segments.len()];
        for &id in &self.ids {
            if id > n {
                return Err(Error::Invalid(format!("segment id {id} out of range")));
            }
            if id > 0 {
                seen[(id - 1) as usize] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("segment with no pixels".into()));
        }
        for (i, a) in self.segments.iter().enumerate() {
            if !a.is_thing {
                for b in &self.segments[..i] {
                    if !b.is_thing && b.category == a.category {
                        return Err(Error::Invalid(format!(
                            "stuff category {} appears twice",
                            a.category
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn segment_area(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }
}

/// Softmax over the temperature-scaled dot products between each feature
/// row and every table vector.
pub fn classify(features: &Tensor, table: &EmbeddingTable, temperature: f64) -> Result<Tensor> {
    let (m, dim) = match features.shape() {
        [m, d] => (*m, *d),
        s => return Err(Error::Shape(format!("classify wants [M,out_dim], got {s:?}"))),
    };
    if table.is_empty() {
        return Err(Error::Invalid("embedding table is empty".into()));
    }
    if table.dim() != dim {
        return Err(Error::Shape(format!(
            "feature width {dim} vs table width {}",
            table.dim()
        )));
    }
    let c = table.len();
    let mut out = Tensor::zeros(&[m, c]);
    for i in 0..m {
        let f = features.row(i);
        let mut logits = vec![0.0; c];
        for (j, e) in table.entries().iter().enumerate() {
            let mut acc = 0.0;
            for (a, b) in f.iter().zip(&e.vector) {
                acc += a * b;
            }
            logits[j] = temperature * acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            sum += *l;
        }
        for (j, l) in logits.iter().enumerate() {
            out.set2(i, j, l / sum);
        }
    }
    Ok(out)
}

/// Crop-and-encode baseline: for each mask, multiply it into the image,
/// run the full encoder, and classify the class feature. Costs exactly M
/// forward passes.
pub fn clip_baseline(
    image: &Tensor,
    masks: &MaskSet,
    weights: &FrozenWeights,
    table: &EmbeddingTable,
    temperature: f64,
) -> Result<Tensor> {
    let m = masks.len();
    let size = weights.config.image_size;
    let out_dim = weights.config.out_dim;
    let mut features = Tensor::zeros(&[m, out_dim]);
    for i in 0..m {
        let px = masks.pixels(i);
        let mut masked = image.clone();
        for c in 0..3 {
            for (p, &mv) in masked.data_mut()[c * size * size..(c + 1) * size * size]
                .iter_mut()
                .zip(px)
            {
                *p *= mv;
            }
        }
        let (feature, _) = encode(&masked, weights)?;
        features.data_mut()[i * out_dim..(i + 1) * out_dim].copy_from_slice(&feature);
    }
    classify(&features, table, temperature)
}

/// Class-agnostic synthetic proposer: a pixel is foreground when any
/// channel exceeds that channel's quantile; 4-connected foreground
/// components of area >= min_area become binary masks, plus one background
/// mask covering everything else.
pub fn propose_masks(image: &Tensor, quantile: f64, min_area: usize) -> Result<MaskSet> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("propose_masks wants [C,H,W], got {s:?}"))),
    };
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Invalid(format!("quantile {quantile} out of [0,1]")));
    }
    let hw = h * w;
    // per-channel quantile thresholds
    let mut thresholds = vec![0.0; c];
    for ch in 0..c {
        let mut vals: Vec<f64> = image.data()[ch * hw..(ch + 1) * hw].to_vec();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((quantile * (hw - 1) as f64).round() as usize).min(hw - 1);
        thresholds[ch] = vals[idx];
    }
    let mut fg = vec![false; hw];
    for (p, is_fg) in fg.iter_mut().enumerate() {
        *is_fg = (0..c).any(|ch| image.data()[ch * hw + p] > thresholds[ch]);
    }
    // 4-connected components over the foreground, scan order
    let mut label = vec![usize::MAX; hw];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..hw {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut pixels = Vec::new();
        let mut queue = vec![start];
        label[start] = id;
        while let Some(p) = queue.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if fg[q] && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        components.push(pixels);
    }
    let kept: Vec<&Vec<usize>> = components.iter().filter(|c| c.len() >= min_area).collect();
    let mut covered = vec![false; hw];
    let mut data = Vec::new();
    for comp in &kept {
        let mut mask = vec![0.0; hw];
        for &p in comp.iter() {
            mask[p] = 1.0;
            covered[p] = true;
        }
        data.extend_from_slice(&mask);
    }
    let mut n_masks = kept.len();
    if covered.iter().any(|&v| !v) {
        data.extend(covered.iter().map(|&v| if v { 0.0 } else { 1.0 }));
        n_masks += 1;
    }
    if n_masks == 0 {
        return Err(Error::Invalid("proposer produced zero masks".into()));
    }
    MaskSet::new(Tensor::from_vec(&[n_masks, h, w], data)?, DEFAULT_THRESHOLD)
}

/// Greedy confidence-ordered panoptic merging. Predictions are binarized at
/// 0.5; pixels go to the highest-confidence unclaimed segment; segments
/// keeping less than half their binary area, or fewer than `min_area`
/// pixels, are dropped; stuff segments sharing a category merge into one
/// id. Ties in confidence break toward the lower input index.
pub fn merge_panoptic(
    preds: &[SegmentPrediction],
    table: &EmbeddingTable,
    min_area: usize,
) -> Result<PanopticMap> {
    if preds.is_empty() {
        return Err(Error::Invalid("merge_panoptic got no predictions".into()));
    }
    let (h, w) = match preds[0].mask.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("prediction mask wants [H,W], got {s:?}"))),
    };
    for p in preds {
        if p.mask.shape() != [h, w] {
            return Err(Error::Shape("prediction masks disagree on H x W".into()));
        }
        if p.category >= table.len() {
            return Err(Error::Invalid(format!("category {} not in table", p.category)));
        }
    }
    let hw = h * w;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut ids = vec![0u32; hw];
    let mut segments: Vec<PanopticSegment> = Vec::new();
    // stuff category -> existing segment id
    let mut stuff_id: Vec<Option<u32>> = vec![None; table.len()];
    for &pi in &order {
        let pred = &preds[pi];
        let binary: Vec<usize> = pred
            .mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.5)
            .map(|(p, _)| p)
            .collect();
        let surviving: Vec<usize> = binary.iter().copied().filter(|&p| ids[p] == 0).collect();
        if surviving.len() * 2 < binary.len() || surviving.len() < min_area {
            continue;
        }
        let is_thing = table.entries()[pred.category].is_thing;
        let id = if !is_thing {
            if let Some(existing) = stuff_id[pred.category] {
                let seg = &mut segments[(existing - 1) as usize];
                seg.confidence = seg.confidence.max(pred.confidence);
                existing
            } else {
                segments.push(PanopticSegment {
                    category: pred.category,
                    is_thing,
                    confidence: pred.confidence,
                });
                let id = segments.len() as u32;
                stuff_id[pred.category] = Some(id);
                id
            }
        } else {
            segments.push(PanopticSegment {
                category: pred.category,
                is_thing,
                confidence: pred.confidence,
            });
            segments.len() as u32
        };
        for p in surviving {
            ids[p] = id;
        }
    }
    let map = PanopticMap {
        ids,
        height: h,
        width: w,
        segments,
    };
    map.validate()?;
    Ok(map)
}
