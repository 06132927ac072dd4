//! Training of the relative-mask-attention parameters on a frozen
//! backbone: dice/BCE mask losses plus cross-entropy against the embedding
//! table with a constant-logit no-object slot, Hungarian proposal-to-GT
//! matching, and a plain gradient-descent fitting loop.

use crate::error::{Error, Result};
use crate::mask_tokens::MaskSet;
use crate::pipeline::EmbeddingTable;
use crate::rma::{self, RmaGrads, RMAParams};
use crate::tensor::Tensor;
use crate::vit::FrozenWeights;

/// Loss term weights; defaults follow the mask-localization recipe
/// (cross-entropy 2, dice 5, BCE 5).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 2.0,
            dice: 5.0,
            bce: 5.0,
        }
    }
}

pub const DICE_SMOOTHING: f64 = 1.0;
pub const BCE_EPS: f64 = 1e-7;
/// Matched pairs below this IoU are discarded as spurious.
pub const MATCH_IOU_FLOOR: f64 = 0.1;

/// One-to-one pairs (proposal index, gt index); proposals absent from
/// `pairs` take the no-object class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn gt_for(&self, proposal: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == proposal).map(|(_, g)| *g)
    }
}

/// Soft dice loss with smoothing 1; two empty masks are defined to agree
/// (loss 0) rather than hitting the smoothing floor.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    if psum == 0.0 && gsum == 0.0 {
        return 0.0;
    }
    1.0 - 2.0 * inter / (psum + gsum + DICE_SMOOTHING)
}

/// Mean per-pixel binary cross-entropy; predictions are clamped away from
/// {0, 1} before the logs.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc += -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
    }
    acc / pred.len() as f64
}

/// Negative log of the target's softmax score.
pub fn ce_loss(scores: &[f64], target: usize) -> f64 {
    -scores[target].max(f64::MIN_POSITIVE).ln()
}

/// Softmax over temperature-scaled table logits plus a constant-logit-0
/// no-object slot at index C.
pub fn classify_with_no_object(
    features: &Tensor,
    table: &EmbeddingTable,
    temperature: f64,
) -> Result<Tensor> {
    let (m, dim) = match features.shape() {
        [m, d] => (*m, *d),
        s => return Err(Error::Shape(format!("features want [M,out_dim], got {s:?}"))),
    };
    if table.dim() != dim {
        return Err(Error::Shape(format!(
            "feature width {dim} vs table width {}",
            table.dim()
        )));
    }
    let c = table.len();
    let mut out = Tensor::zeros(&[m, c + 1]);
    for i in 0..m {
        let f = features.row(i);
        let mut logits = vec![0.0; c + 1];
        for (j, e) in table.entries().iter().enumerate() {
            logits[j] = temperature * f.iter().zip(&e.vector).map(|(a, b)| a * b).sum::<f64>();
        }
        // logits[c] stays 0: the no-object slot
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

/// Minimum-cost assignment over a rectangular cost matrix [rows × cols];
/// returns for each row its assigned column (every row of the smaller side
/// is assigned). O(n³) shortest-augmenting-path algorithm.
pub fn hungarian(cost: &Tensor) -> Result<Vec<Option<usize>>> {
    let (rows, cols) = match cost.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Shape(format!("cost wants rank 2, got {s:?}"))),
    };
    let n = rows.max(cols);
    let pad = cost
        .data()
        .iter()
        .cloned()
        .fold(0.0_f64, |a, b| a.max(b.abs()))
        * (n as f64)
        + 1.0;
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost.at2(i, j)
        } else {
            pad
        }
    };
    // potentials u/v, column matches; 1-based sentinel at index 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    Ok(assignment)
}

fn binary_iou(a: &[f64], ta: f64, b: &[f64], tb: f64) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        let xa = *x >= ta;
        let yb = *y >= tb;
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hungarian matching on the mask-localization cost (class-agnostic);
/// matched pairs with binarized IoU below `MATCH_IOU_FLOOR` are dropped.
pub fn match_proposals(
    proposals: &MaskSet,
    gts: &MaskSet,
    w: &LossWeights,
) -> Result<MatchResult> {
    let np = proposals.len();
    let ng = gts.len();
    if np == 0 || ng == 0 {
        return Ok(MatchResult { pairs: vec![] });
    }
    let mut cost = Tensor::zeros(&[np, ng]);
    for i in 0..np {
        for j in 0..ng {
            let c = w.bce * bce_loss(proposals.pixels(i), gts.pixels(j))
                + w.dice * dice_loss(proposals.pixels(i), gts.pixels(j));
            cost.set2(i, j, c);
        }
    }
    let assignment = hungarian(&cost)?;
    let mut pairs = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        if let Some(j) = a {
            let iou = binary_iou(
                proposals.pixels(i),
                proposals.threshold(),
                gts.pixels(*j),
                gts.threshold(),
            );
            if iou >= MATCH_IOU_FLOOR {
                pairs.push((i, *j));
            }
        }
    }
    Ok(MatchResult { pairs })
}

/// The combined objective: λ_ce · mean cross-entropy over all proposals
/// (unmatched ones target the no-object slot) plus dice and BCE summed over
/// matched pairs.
pub fn total_loss(
    scores: &Tensor,
    refined: &MaskSet,
    matches: &MatchResult,
    gts: &MaskSet,
    gt_categories: &[usize],
    w: &LossWeights,
) -> f64 {
    let m = refined.len();
    let c = scores.shape()[1] - 1;
    let mut ce_sum = 0.0;
    for i in 0..m {
        let target = matches.gt_for(i).map_or(c, |g| gt_categories[g]);
        ce_sum += ce_loss(scores.row(i), target);
    }
    let mut mask_sum = 0.0;
    for &(i, j) in &matches.pairs {
        mask_sum += w.dice * dice_loss(refined.pixels(i), gts.pixels(j))
            + w.bce * bce_loss(refined.pixels(i), gts.pixels(j));
    }
    w.ce * ce_sum / m as f64 + mask_sum
}

/// Loss plus its gradients at the two trainable outputs of the forward
/// pass: the mask features (through the classification term) and the
/// refined masks (through the localization terms).
pub fn loss_and_output_grads(
    features: &Tensor,
    refined: &MaskSet,
    matches: &MatchResult,
    gts: &MaskSet,
    gt_categories: &[usize],
    table: &EmbeddingTable,
    temperature: f64,
    w: &LossWeights,
) -> Result<(f64, Tensor, Tensor)> {
    let m = refined.len();
    let out_dim = features.shape()[1];
    let c = table.len();
    let scores = classify_with_no_object(features, table, temperature)?;
    let loss = total_loss(&scores, refined, matches, gts, gt_categories, w);

    // classification gradient: d ce/d logit_k = s_k - 1{k = target};
    // logit_k = τ e_k · f for k < C, constant for the no-object slot
    let mut d_features = Tensor::zeros(&[m, out_dim]);
    for i in 0..m {
        let target = matches.gt_for(i).map_or(c, |g| gt_categories[g]);
        let coeff = w.ce / m as f64;
        for k in 0..c {
            let d_logit = scores.at2(i, k) - if k == target { 1.0 } else { 0.0 };
            let scale = coeff * d_logit * temperature;
            for (d, e) in d_features.data_mut()[i * out_dim..(i + 1) * out_dim]
                .iter_mut()
                .zip(&table.entries()[k].vector)
            {
                *d += scale * e;
            }
        }
    }

    // localization gradient on matched refined masks
    let hw = refined.height() * refined.width();
    let mut d_refined = Tensor::zeros(&[m, refined.height(), refined.width()]);
    for &(i, j) in &matches.pairs {
        let pred = refined.pixels(i);
        let gt = gts.pixels(j);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            inter += p * g;
            psum += p;
            gsum += g;
        }
        let den = psum + gsum + DICE_SMOOTHING;
        let empty = psum == 0.0 && gsum == 0.0;
        for px in 0..hw {
            let p = pred[px];
            let g = gt[px];
            let mut d = 0.0;
            if !empty {
                d += w.dice * (-2.0 * g / den + 2.0 * inter / (den * den));
            }
            if p > BCE_EPS && p < 1.0 - BCE_EPS {
                d += w.bce * (-(g / p) + (1.0 - g) / (1.0 - p)) / hw as f64;
            }
            d_refined.data_mut()[i * hw + px] += d;
        }
    }
    Ok((loss, d_features, d_refined))
}

/// One training sample: the image, coarse proposal masks, ground-truth
/// masks, and each ground-truth mask's category index into the table.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub proposals: MaskSet,
    pub gt_masks: MaskSet,
    pub gt_categories: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: RMAParams,
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the RMA parameters only. Matching is
/// computed once per sample on the coarse proposals and held fixed so the
/// objective stays smooth across steps. The frozen backbone hash is
/// asserted unchanged.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    dataset: &[TrainSample],
    weights: &FrozenWeights,
    rma: &RMAParams,
    table: &EmbeddingTable,
    temperature: f64,
    loss_weights: &LossWeights,
    steps: usize,
    lr: f64,
) -> Result<FitReport> {
    let matches: Vec<MatchResult> = dataset
        .iter()
        .map(|s| match_proposals(&s.proposals, &s.gt_masks, loss_weights))
        .collect::<Result<_>>()?;
    let mut params = rma.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grads = RmaGrads::zeros_like(&params);
        let mut loss_sum = 0.0;
        for (sample, m) in dataset.iter().zip(&matches) {
            let out = rma::forward(&sample.image, &sample.proposals, weights, Some(&params), true)?;
            let (loss, d_feat, d_ref) = loss_and_output_grads(
                &out.mask_features,
                &out.refined,
                m,
                &sample.gt_masks,
                &sample.gt_categories,
                table,
                temperature,
                loss_weights,
            )?;
            loss_sum += loss;
            let g = rma::backward(
                weights,
                &params,
                out.tape.as_ref().unwrap(),
                &d_feat,
                &d_ref,
                &out.tokens,
            )?;
            grads.add(&g);
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss_sum);
        if lr != 0.0 {
            for ((_, p), (_, g)) in params
                .named_tensors_mut()
                .into_iter()
                .zip(grads_named(&grads))
            {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
    }
    if !weights.hash_unchanged() {
        return Err(Error::Invalid("frozen backbone was mutated during fit".into()));
    }
    Ok(FitReport { params, losses })
}

fn grads_named(g: &RmaGrads) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (l, lp) in &g.layers {
        for (name, t) in lp.named() {
            out.push((format!("rma.layer{l}.{name}"), t));
        }
    }
    out
}
