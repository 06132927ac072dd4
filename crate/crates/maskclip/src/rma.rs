//! Relative mask attention: mask patch tokens, the relative attention term
//! added to the mask-token/image-token logits, and per-layer mask
//! refinement in sigmoid space.
//!
//! Layers in the configured set use halved logit scaling with the relative
//! term added, and emit a refined mask that replaces the current one for
//! every subsequent layer (both the boolean attention mask and the mask
//! patch tokens are re-derived from it). Only the parameters in
//! [`RMAParams`] are trainable; the backbone stays frozen, and the backward
//! pass here is hand-derived reverse mode restricted to those parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask_tokens::{build_attention_mask, patch_occupancy, MaskSet};
use crate::tensor::{
    bilinear_backward, bilinear_resize, conv2d, conv2d_input_grad, conv2d_weight_grad, dot,
    gelu_prime, layer_norm, layer_norm_backward_input, linear, linear_backward_input,
    logit_clamped_scalar, sigmoid, Tensor,
};
use crate::vit::{
    block_forward, initial_sequence, project_feature, record_forward_pass, AttnOptions,
    BlockTape, FrozenWeights, TokenSequence,
};

/// Clamping epsilon for the inverse sigmoid; keeps |logit| around 9.2 so
/// refinement residuals have headroom without overflow.
pub const REFINE_EPS: f64 = 1e-4;

const F2_INIT_STD: f64 = 0.02;
const FR1_INIT_STD: f64 = 0.08;

/// Trainable parameters of one relative-mask-attention layer.
#[derive(Debug, Clone)]
pub struct RmaLayerParams {
    /// Mask patch embedder: strided conv, 1 input channel, D outputs,
    /// kernel = stride = patch size.
    pub f2_kernel: Tensor,
    pub f2_bias: Tensor,
    /// Relative projections, D -> D.
    pub wqm: Tensor,
    pub bqm: Tensor,
    pub wkm: Tensor,
    pub bkm: Tensor,
    /// Refinement head: two 3x3 convs over the patch grid, D -> D/2 -> 1.
    pub fr1_kernel: Tensor,
    pub fr1_bias: Tensor,
    pub fr2_kernel: Tensor,
    pub fr2_bias: Tensor,
}

/// All trainable parameters, keyed by 1-based layer index.
#[derive(Debug, Clone)]
pub struct RMAParams {
    pub layers: BTreeMap<usize, RmaLayerParams>,
}

impl RMAParams {
    /// Quarter-depth layer set ending at the last layer (e.g. depth 8 gives
    /// {2, 4, 6, 8}).
    pub fn default_layer_set(depth: usize) -> Vec<usize> {
        if depth < 4 {
            return (1..=depth).collect();
        }
        let stride = depth / 4;
        (1..=4).map(|i| depth - (4 - i) * stride).collect()
    }

    /// Initialization that reproduces the no-relative-attention baseline
    /// modulo the halved scale: the relative projections start as copies of
    /// the frozen query/key projections, the mask patch embedder is small
    /// random, and the refinement head's final layer is zero so refinement
    /// starts as the identity.
    pub fn init(weights: &FrozenWeights, layer_set: &[usize], seed: u64) -> Result<Self> {
        let cfg = &weights.config;
        if layer_set.is_empty() {
            return Err(Error::Invalid("layer set must not be empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let d2 = (d / 2).max(1);
        let p = cfg.patch_size;
        let mut layers = BTreeMap::new();
        for &l in layer_set {
            if l == 0 || l > cfg.depth {
                return Err(Error::Invalid(format!(
                    "layer index {l} out of range 1..={}",
                    cfg.depth
                )));
            }
            let lw = &weights.layers[l - 1];
            let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
                let dist = Normal::new(0.0, std).unwrap();
                let count: usize = shape.iter().product();
                Tensor::from_vec(shape, (0..count).map(|_| dist.sample(rng)).collect()).unwrap()
            };
            layers.insert(
                l,
                RmaLayerParams {
                    f2_kernel: normal(&[d, 1, p, p], F2_INIT_STD, &mut rng),
                    f2_bias: Tensor::zeros(&[d]),
                    wqm: lw.wq.clone(),
                    bqm: Tensor::from_vec(&[d], lw.bq.clone())?,
                    wkm: lw.wk.clone(),
                    bkm: Tensor::from_vec(&[d], lw.bk.clone())?,
                    fr1_kernel: normal(&[d2, d, 3, 3], FR1_INIT_STD, &mut rng),
                    fr1_bias: Tensor::zeros(&[d2]),
                    fr2_kernel: Tensor::zeros(&[1, d2, 3, 3]),
                    fr2_bias: Tensor::zeros(&[1]),
                },
            );
        }
        Ok(RMAParams { layers })
    }

    /// Fully random parameters; used by gradient checks so no tensor starts
    /// at a zero-gradient point.
    pub fn random(weights: &FrozenWeights, layer_set: &[usize], seed: u64) -> Result<Self> {
        let mut params = Self::init(weights, layer_set, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let dist = Normal::new(0.0, 0.05).unwrap();
        for lp in params.layers.values_mut() {
            for t in [
                &mut lp.f2_kernel,
                &mut lp.f2_bias,
                &mut lp.wqm,
                &mut lp.bqm,
                &mut lp.wkm,
                &mut lp.bkm,
                &mut lp.fr1_kernel,
                &mut lp.fr1_bias,
                &mut lp.fr2_kernel,
                &mut lp.fr2_bias,
            ] {
                for v in t.data_mut() {
                    *v += dist.sample(&mut rng);
                }
            }
        }
        Ok(params)
    }

    pub fn layer_set(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    /// Named views of every trainable tensor, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, lp) in &self.layers {
            for (name, t) in lp.named() {
                out.push((format!("rma.layer{l}.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, lp) in &mut self.layers {
            for (name, t) in lp.named_mut() {
                out.push((format!("rma.layer{l}.{name}"), t));
            }
        }
        out
    }

    /// All parameters flattened into one vector (stable order).
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in self.named_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

impl RmaLayerParams {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("f2_kernel", &self.f2_kernel),
            ("f2_bias", &self.f2_bias),
            ("wqm", &self.wqm),
            ("bqm", &self.bqm),
            ("wkm", &self.wkm),
            ("bkm", &self.bkm),
            ("fr1_kernel", &self.fr1_kernel),
            ("fr1_bias", &self.fr1_bias),
            ("fr2_kernel", &self.fr2_kernel),
            ("fr2_bias", &self.fr2_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("f2_kernel", &mut self.f2_kernel),
            ("f2_bias", &mut self.f2_bias),
            ("wqm", &mut self.wqm),
            ("bqm", &mut self.bqm),
            ("wkm", &mut self.wkm),
            ("bkm", &mut self.bkm),
            ("fr1_kernel", &mut self.fr1_kernel),
            ("fr1_bias", &mut self.fr1_bias),
            ("fr2_kernel", &mut self.fr2_kernel),
            ("fr2_bias", &mut self.fr2_bias),
        ]
    }
}

/// Gradients, same layout as [`RMAParams`].
#[derive(Debug, Clone)]
pub struct RmaGrads {
    pub layers: BTreeMap<usize, RmaLayerParams>,
}

impl RmaGrads {
    pub fn zeros_like(params: &RMAParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|(l, lp)| {
                (
                    *l,
                    RmaLayerParams {
                        f2_kernel: Tensor::zeros(lp.f2_kernel.shape()),
                        f2_bias: Tensor::zeros(lp.f2_bias.shape()),
                        wqm: Tensor::zeros(lp.wqm.shape()),
                        bqm: Tensor::zeros(lp.bqm.shape()),
                        wkm: Tensor::zeros(lp.wkm.shape()),
                        bkm: Tensor::zeros(lp.bkm.shape()),
                        fr1_kernel: Tensor::zeros(lp.fr1_kernel.shape()),
                        fr1_bias: Tensor::zeros(lp.fr1_bias.shape()),
                        fr2_kernel: Tensor::zeros(lp.fr2_kernel.shape()),
                        fr2_bias: Tensor::zeros(lp.fr2_bias.shape()),
                    },
                )
            })
            .collect();
        RmaGrads { layers }
    }

    pub fn add(&mut self, other: &RmaGrads) {
        for (l, g) in &mut self.layers {
            let o = &other.layers[l];
            for ((_, a), (_, b)) in g.named_mut().into_iter().zip(o.named()) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }
}

// ---- the spec's standalone operations ------------------------------------

/// Patchify each mask with the strided conv f2: token (i, j) is f2 applied
/// to mask i over patch j (row-major over the patch grid).
pub fn mask_patch_tokens(
    masks: &MaskSet,
    f2_kernel: &Tensor,
    f2_bias: &Tensor,
    patch_size: usize,
) -> Result<Tensor> {
    let m = masks.len();
    let d = f2_kernel.shape()[0];
    let g = masks.height() / patch_size;
    let n = g * g;
    let mut out = Tensor::zeros(&[m, n, d]);
    for i in 0..m {
        let conv = conv2d(
            &masks.mask_tensor(i),
            f2_kernel,
            Some(f2_bias.data()),
            patch_size,
            0,
        )?;
        for gy in 0..g {
            for gx in 0..g {
                let j = gy * g + gx;
                for c in 0..d {
                    out.data_mut()[(i * n + j) * d + c] = conv.at3(c, gy, gx);
                }
            }
        }
    }
    Ok(out)
}

/// Relative attention term: A'[i, j] = sum_c (Qm(T_MP[i,j]) * Km(T_IM[j]))_c,
/// with Km(T_IM) broadcast across the mask axis.
pub fn relative_attention_logits(
    t_mp: &Tensor,
    t_im: &Tensor,
    wqm: &Tensor,
    bqm: &Tensor,
    wkm: &Tensor,
    bkm: &Tensor,
) -> Result<Tensor> {
    let (m, n, d) = match t_mp.shape() {
        [m, n, d] => (*m, *n, *d),
        s => return Err(Error::Shape(format!("T_MP wants [M,N,D], got {s:?}"))),
    };
    if t_im.shape() != [n, d] {
        return Err(Error::Shape(format!(
            "T_IM wants [{n},{d}], got {:?}",
            t_im.shape()
        )));
    }
    let flat = Tensor::from_vec(&[m * n, d], t_mp.data().to_vec())?;
    let qm = linear(&flat, wqm, bqm.data())?;
    let km = linear(t_im, wkm, bkm.data())?;
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            out.set2(i, j, dot(qm.row(i * n + j), km.row(j)));
        }
    }
    Ok(out)
}

/// Per-head combined logits for the mask-token block: the scaled dot
/// product plus the relative term, shared across heads, with the halved
/// denominator.
pub fn combined_attention(
    t_mc: &Tensor,
    t_im: &Tensor,
    a_prime: &Tensor,
    wq: &Tensor,
    bq: &[f64],
    wk: &Tensor,
    bk: &[f64],
    heads: usize,
) -> Result<Tensor> {
    let (m, d) = (t_mc.shape()[0], t_mc.shape()[1]);
    let n = t_im.shape()[0];
    if d % heads != 0 {
        return Err(Error::Invalid(format!("D={d} not divisible by heads={heads}")));
    }
    let dh = d / heads;
    let q = linear(t_mc, wq, bq)?;
    let k = linear(t_im, wk, bk)?;
    let scale = 1.0 / (2.0 * (dh as f64).sqrt());
    let mut out = Tensor::zeros(&[heads, m, n]);
    for h in 0..heads {
        let off = h * dh;
        for i in 0..m {
            for j in 0..n {
                let l = dot(&q.row(i)[off..off + dh], &k.row(j)[off..off + dh])
                    + a_prime.at2(i, j);
                out.data_mut()[(h * m + i) * n + j] = l * scale;
            }
        }
    }
    Ok(out)
}

/// Stabilized sigmoid-space update sigma(sigma^-1(p_hat) + r); an exactly
/// zero residual reproduces the clamped input bit for bit.
pub fn sigmoid_shift(p_hat: f64, r: f64) -> f64 {
    if r == 0.0 {
        p_hat
    } else {
        sigmoid(logit_clamped_scalar(p_hat, REFINE_EPS) + r)
    }
}

/// One refinement step (Eq.-5 shape): the refinement head maps the
/// elementwise query/key product to a patch-grid residual which is
/// upsampled to pixel space and added in sigmoid space.
#[allow(clippy::too_many_arguments)]
pub fn refine_mask(
    m_c: &MaskSet,
    t_mc: &Tensor,
    t_im: &Tensor,
    wq: &Tensor,
    bq: &[f64],
    wk: &Tensor,
    bk: &[f64],
    fr: &RmaLayerParams,
) -> Result<MaskSet> {
    let q = linear(t_mc, wq, bq)?;
    let k = linear(t_im, wk, bk)?;
    let residual = refine_residual(&q, &k, fr, m_c.height(), m_c.width())?;
    let m = m_c.len();
    let hw = m_c.height() * m_c.width();
    let mut out = vec![0.0; m * hw];
    for i in 0..m {
        let px = m_c.pixels(i);
        let r = &residual.data()[i * hw..(i + 1) * hw];
        for (o, (&p, &rv)) in out[i * hw..(i + 1) * hw]
            .iter_mut()
            .zip(px.iter().zip(r.iter()))
        {
            *o = sigmoid_shift(p.clamp(REFINE_EPS, 1.0 - REFINE_EPS), rv);
        }
    }
    MaskSet::new(
        Tensor::from_vec(&[m, m_c.height(), m_c.width()], out)?,
        m_c.threshold(),
    )
}

/// Residual field for all masks: f_r over the [M, D, g, g] elementwise
/// product grid, bilinearly upsampled to [M, H, W].
fn refine_residual(
    q_mask: &Tensor,
    k_img: &Tensor,
    fr: &RmaLayerParams,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (m, d) = (q_mask.shape()[0], q_mask.shape()[1]);
    let n = k_img.shape()[0];
    let g = (n as f64).sqrt() as usize;
    if g * g != n {
        return Err(Error::Shape(format!("patch grid for {n} tokens is not square")));
    }
    let mut out = Tensor::zeros(&[m, out_h, out_w]);
    for i in 0..m {
        let rin = build_refine_input(q_mask.row(i), k_img, g, d);
        let h1 = conv2d(&rin, &fr.fr1_kernel, Some(fr.fr1_bias.data()), 1, 1)?;
        let mut act = h1.clone();
        for v in act.data_mut() {
            *v = v.max(0.0);
        }
        let res = conv2d(&act, &fr.fr2_kernel, Some(fr.fr2_bias.data()), 1, 1)?;
        let up = bilinear_resize(&res, out_h, out_w)?;
        out.data_mut()[i * out_h * out_w..(i + 1) * out_h * out_w]
            .copy_from_slice(up.data());
    }
    Ok(out)
}

/// [D, g, g] grid whose channel c at cell j is q[c] * k_img[j][c].
fn build_refine_input(q_row: &[f64], k_img: &Tensor, g: usize, d: usize) -> Tensor {
    let mut rin = Tensor::zeros(&[d, g, g]);
    for gy in 0..g {
        for gx in 0..g {
            let j = gy * g + gx;
            let kj = k_img.row(j);
            for c in 0..d {
                rin.data_mut()[(c * g + gy) * g + gx] = q_row[c] * kj[c];
            }
        }
    }
    rin
}

// ---- full forward with tape -----------------------------------------------

/// Intermediates kept for the RMA-specific part of one layer.
#[derive(Debug, Clone)]
pub struct RmaLayerTape {
    /// Mask values used by this layer (pre-refinement).
    pub mask_pre: Tensor,
    pub t_mp: Tensor,
    pub qm: Tensor,
    pub km: Tensor,
    pub a_prime: Tensor,
    pub p_hat: Tensor,
    pub res_up: Tensor,
    pub m_new: Tensor,
    pub h1_pre: Vec<Tensor>,
    pub rin: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub blocks: Vec<BlockTape>,
    pub rma: Vec<Option<RmaLayerTape>>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub mask_features: Tensor,
    pub class_feature: Vec<f64>,
    pub tokens: TokenSequence,
    pub refined: MaskSet,
    pub tape: Option<ForwardTape>,
}

/// Joint forward over the (N+1+M)-token sequence. `rma` selects the layers
/// that use relative attention and refinement; None reproduces the plain
/// mask-class-token forward.
pub fn forward(
    image: &Tensor,
    masks: &MaskSet,
    weights: &FrozenWeights,
    rma: Option<&RMAParams>,
    want_tape: bool,
) -> Result<ForwardOutput> {
    record_forward_pass();
    let cfg = &weights.config;
    let n = cfg.n_patches();
    let m = masks.len();
    if masks.height() != cfg.image_size || masks.width() != cfg.image_size {
        return Err(Error::Shape(format!(
            "masks {}x{} vs image size {}",
            masks.height(),
            masks.width(),
            cfg.image_size
        )));
    }
    let mut seq = initial_sequence(image, weights, m)?;
    let mut current = masks.clone();
    let mut occ = patch_occupancy(&current, cfg.patch_size)?;
    let mut attn_mask = build_attention_mask(n, m, &occ)?;

    let mut blocks: Vec<BlockTape> = Vec::new();
    let mut rma_tapes: Vec<Option<RmaLayerTape>> = Vec::new();

    for (li, lw) in weights.layers.iter().enumerate() {
        let layer_no = li + 1;
        let params = rma.and_then(|r| r.layers.get(&layer_no));
        let mut tape = BlockTape::default();
        let need_tape = want_tape || params.is_some();

        let (a_prime, pre_rma) = if let Some(p) = params {
            // the relative term uses the layer's pre-norm image tokens
            let (y, _, _) = layer_norm(&seq.tokens, &lw.ln1_gamma, &lw.ln1_beta);
            let t_im = Tensor::from_vec(
                &[n, cfg.dim],
                y.data()[..n * cfg.dim].to_vec(),
            )?;
            let t_mp3 = mask_patch_tokens(&current, &p.f2_kernel, &p.f2_bias, cfg.patch_size)?;
            let flat = Tensor::from_vec(&[m * n, cfg.dim], t_mp3.data().to_vec())?;
            let qm = linear(&flat, &p.wqm, p.bqm.data())?;
            let km = linear(&t_im, &p.wkm, p.bkm.data())?;
            let mut ap = Tensor::zeros(&[m, n]);
            for i in 0..m {
                for j in 0..n {
                    ap.set2(i, j, dot(qm.row(i * n + j), km.row(j)));
                }
            }
            (Some(ap), Some((flat, qm, km)))
        } else {
            (None, None)
        };

        let opts = AttnOptions {
            mask_row_start: if m > 0 { Some(n + 1) } else { None },
            half_scale_mask_rows: params.is_some(),
            a_prime: a_prime.as_ref(),
            n_image: n,
        };
        let x_out = block_forward(
            &seq.tokens,
            &attn_mask,
            lw,
            cfg.heads,
            &opts,
            if need_tape { Some(&mut tape) } else { None },
        )?;

        let rma_tape = if let Some(p) = params {
            // refinement from this layer's mask-token queries and image keys
            let d = cfg.dim;
            let g = cfg.grid();
            let hpix = current.height();
            let wpix = current.width();
            let mut q_mask = Tensor::zeros(&[m, d]);
            for i in 0..m {
                q_mask.data_mut()[i * d..(i + 1) * d].copy_from_slice(tape.q.row(n + 1 + i));
            }
            let k_img = Tensor::from_vec(&[n, d], tape.k.data()[..n * d].to_vec())?;

            let mut h1_pres = Vec::with_capacity(m);
            let mut rins = Vec::with_capacity(m);
            let mut res_up = Tensor::zeros(&[m, hpix, wpix]);
            for i in 0..m {
                let rin = build_refine_input(q_mask.row(i), &k_img, g, d);
                let h1 = conv2d(&rin, &p.fr1_kernel, Some(p.fr1_bias.data()), 1, 1)?;
                let mut act = h1.clone();
                for v in act.data_mut() {
                    *v = v.max(0.0);
                }
                let res = conv2d(&act, &p.fr2_kernel, Some(p.fr2_bias.data()), 1, 1)?;
                let up = bilinear_resize(&res, hpix, wpix)?;
                res_up.data_mut()[i * hpix * wpix..(i + 1) * hpix * wpix]
                    .copy_from_slice(up.data());
                h1_pres.push(h1);
                rins.push(rin);
            }
            let mut p_hat = current.tensor().clone();
            for v in p_hat.data_mut() {
                *v = v.clamp(REFINE_EPS, 1.0 - REFINE_EPS);
            }
            let mut m_new = Tensor::zeros(&[m, hpix, wpix]);
            for (o, (&ph, &r)) in m_new
                .data_mut()
                .iter_mut()
                .zip(p_hat.data().iter().zip(res_up.data().iter()))
            {
                *o = sigmoid_shift(ph, r);
            }
            let (flat, qm, km) = pre_rma.unwrap();
            let tape_entry = RmaLayerTape {
                mask_pre: current.tensor().clone(),
                t_mp: flat,
                qm,
                km,
                a_prime: a_prime.clone().unwrap(),
                p_hat,
                res_up,
                m_new: m_new.clone(),
                h1_pre: h1_pres,
                rin: rins,
            };
            let refined = MaskSet::new(m_new, current.threshold())?;
            occ = patch_occupancy(&refined, cfg.patch_size)?;
            attn_mask = build_attention_mask(n, m, &occ)?;
            current = refined;
            Some(tape_entry)
        } else {
            None
        };

        seq = TokenSequence {
            tokens: x_out,
            n_image: n,
            n_mask: m,
        };
        if want_tape {
            blocks.push(tape);
            rma_tapes.push(rma_tape);
        }
    }

    let class_feature = project_feature(seq.class_row(), weights);
    let mut mask_features = Tensor::zeros(&[m, cfg.out_dim]);
    for i in 0..m {
        let f = project_feature(seq.mask_row(i), weights);
        mask_features.data_mut()[i * cfg.out_dim..(i + 1) * cfg.out_dim].copy_from_slice(&f);
    }
    Ok(ForwardOutput {
        mask_features,
        class_feature,
        tokens: seq,
        refined: current,
        tape: if want_tape {
            Some(ForwardTape {
                blocks,
                rma: rma_tapes,
            })
        } else {
            None
        },
    })
}

/// Full MaskCLIP visual-encoder forward: per-mask features, refined masks,
/// and the untouched class feature.
pub fn rma_forward(
    image: &Tensor,
    masks: &MaskSet,
    weights: &FrozenWeights,
    rma: &RMAParams,
) -> Result<(Tensor, MaskSet, Vec<f64>)> {
    let out = forward(image, masks, weights, Some(rma), false)?;
    Ok((out.mask_features, out.refined, out.class_feature))
}

// ---- hand-derived backward -------------------------------------------------

/// Reverse-mode gradients of a scalar loss w.r.t. every RMA parameter,
/// given the loss gradients at the two trainable outputs. Image and class
/// rows are functions of the frozen weights only, so gradient flows through
/// the M mask-token rows and the mask chain exclusively; boolean occupancy
/// is treated as locally constant.
pub fn backward(
    weights: &FrozenWeights,
    params: &RMAParams,
    tape: &ForwardTape,
    d_mask_features: &Tensor,
    d_refined: &Tensor,
    final_tokens: &TokenSequence,
) -> Result<RmaGrads> {
    let cfg = &weights.config;
    let n = cfg.n_patches();
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let m = final_tokens.n_mask;
    let g = cfg.grid();
    let mut grads = RmaGrads::zeros_like(params);
    if m == 0 {
        return Ok(grads);
    }

    // feature head: L2-normalize <- projection <- final layer norm
    let mut d_xm = Tensor::zeros(&[m, d]);
    for i in 0..m {
        let row = final_tokens.mask_row(i);
        let x = Tensor::from_vec(&[1, d], row.to_vec())?;
        let (f, means, rstds) = layer_norm(&x, &weights.final_ln_gamma, &weights.final_ln_beta);
        let out_dim = cfg.out_dim;
        let mut v = vec![0.0; out_dim];
        for o in 0..out_dim {
            let mut acc = 0.0;
            for c in 0..d {
                acc += f.data()[c] * weights.proj.at2(c, o);
            }
            v[o] = acc;
        }
        let norm = dot(&v, &v).sqrt();
        let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let dout = d_mask_features.row(i);
        let proj_along = dot(&unit, dout);
        let dv: Vec<f64> = (0..out_dim)
            .map(|o| (dout[o] - unit[o] * proj_along) / norm)
            .collect();
        let mut df = Tensor::zeros(&[1, d]);
        for c in 0..d {
            let mut acc = 0.0;
            for o in 0..out_dim {
                acc += weights.proj.at2(c, o) * dv[o];
            }
            df.data_mut()[c] = acc;
        }
        let dx = layer_norm_backward_input(&df, &x, &weights.final_ln_gamma, &means, &rstds);
        d_xm.data_mut()[i * d..(i + 1) * d].copy_from_slice(dx.data());
    }

    let hw = d_refined.shape()[1] * d_refined.shape()[2];
    let mut d_mask = d_refined.clone();

    for li in (0..weights.layers.len()).rev() {
        let layer_no = li + 1;
        let lw = &weights.layers[li];
        let block = &tape.blocks[li];
        let rma_tape = tape.rma[li].as_ref();
        let lp = params.layers.get(&layer_no);
        let t = n + 1 + m;
        let ms = n + 1;

        // --- MLP backward (mask rows only) ---
        let mlp_dim = cfg.mlp_dim();
        let mut d_mid = d_xm.clone(); // residual branch
        {
            let d_mlp_out = &d_xm;
            let d_act = linear_backward_input(d_mlp_out, &lw.w2);
            let mut d_h = Tensor::zeros(&[m, mlp_dim]);
            for i in 0..m {
                let hrow = block.h_pre.row(ms + i);
                for c in 0..mlp_dim {
                    d_h.set2(i, c, d_act.at2(i, c) * gelu_prime(hrow[c]));
                }
            }
            let d_z = linear_backward_input(&d_h, &lw.w1);
            // slice mask rows of x_mid and the ln2 stats
            let x_mid_m = slice_rows(&block.x_mid, ms, m);
            let dz_full = d_z;
            let d_from_ln = layer_norm_backward_input(
                &dz_full,
                &x_mid_m,
                &lw.ln2_gamma,
                &block.ln2_means[ms..],
                &block.ln2_rstds[ms..],
            );
            for (a, b) in d_mid.data_mut().iter_mut().zip(d_from_ln.data()) {
                *a += b;
            }
        }

        // --- refinement backward ---
        let mut d_q = Tensor::zeros(&[m, d]);
        let mut d_mask_pre = Tensor::zeros(d_mask.shape());
        if let (Some(rt), Some(p)) = (rma_tape, lp) {
            let glayer = grads.layers.get_mut(&layer_no).unwrap();
            let hpix = d_mask.shape()[1];
            let wpix = d_mask.shape()[2];
            for i in 0..m {
                // sigmoid-space update backward
                let mut d_r = Tensor::zeros(&[1, hpix, wpix]);
                for px in 0..hw {
                    let dm = d_mask.data()[i * hw + px];
                    if dm == 0.0 {
                        continue;
                    }
                    let mn = rt.m_new.data()[i * hw + px];
                    let ph = rt.p_hat.data()[i * hw + px];
                    let raw = rt.mask_pre.data()[i * hw + px];
                    let s = mn * (1.0 - mn);
                    d_r.data_mut()[px] = dm * s;
                    // through the clamp: zero where the raw mask was clipped
                    if raw > REFINE_EPS && raw < 1.0 - REFINE_EPS {
                        d_mask_pre.data_mut()[i * hw + px] += dm * s / (ph * (1.0 - ph));
                    }
                }
                let d_grid = bilinear_backward(&d_r, g, g);
                // second refinement conv
                let mut act = rt.h1_pre[i].clone();
                for v in act.data_mut() {
                    *v = v.max(0.0);
                }
                let (dk2, db2) = conv2d_weight_grad(&act, &d_grid, 3, 1, 1);
                add_into(&mut glayer.fr2_kernel, &dk2);
                for (a, b) in glayer.fr2_bias.data_mut().iter_mut().zip(&db2) {
                    *a += b;
                }
                let mut d_act = conv2d_input_grad(&d_grid, &p.fr2_kernel, g, g, 1, 1);
                for (v, h) in d_act.data_mut().iter_mut().zip(rt.h1_pre[i].data()) {
                    if *h <= 0.0 {
                        *v = 0.0;
                    }
                }
                // first refinement conv
                let (dk1, db1) = conv2d_weight_grad(&rt.rin[i], &d_act, 3, 1, 1);
                add_into(&mut glayer.fr1_kernel, &dk1);
                for (a, b) in glayer.fr1_bias.data_mut().iter_mut().zip(&db1) {
                    *a += b;
                }
                let d_rin = conv2d_input_grad(&d_act, &p.fr1_kernel, g, g, 1, 1);
                // rin[c][cell j] = q[c] * k_img[j][c]
                for gy in 0..g {
                    for gx in 0..g {
                        let j = gy * g + gx;
                        let kj = &block.k.row(j)[..d];
                        for c in 0..d {
                            d_q.data_mut()[i * d + c] +=
                                d_rin.data()[(c * g + gy) * g + gx] * kj[c];
                        }
                    }
                }
            }
        } else {
            d_mask_pre = d_mask.clone();
        }

        // --- attention backward (mask rows only) ---
        let mut d_x_in = d_mid.clone(); // residual branch
        {
            let d_ctx = linear_backward_input(&d_mid, &lw.wo);
            let half = lp.is_some();
            let scale = if half {
                1.0 / (2.0 * (dh as f64).sqrt())
            } else {
                1.0 / (dh as f64).sqrt()
            };
            let mut d_aprime = Tensor::zeros(&[m, n]);
            for h in 0..heads {
                let off = h * dh;
                let probs = &block.probs[h];
                for i in 0..m {
                    let row = ms + i;
                    // dP over attendable columns (p > 0 only there)
                    let mut dp = vec![0.0; t];
                    let mut inner = 0.0;
                    for j in 0..t {
                        let pij = probs.at2(row, j);
                        if pij == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        let vj = &block.v.row(j)[off..off + dh];
                        for c in 0..dh {
                            acc += d_ctx.at2(i, off + c) * vj[c];
                        }
                        dp[j] = acc;
                        inner += pij * acc;
                    }
                    for j in 0..t {
                        let pij = probs.at2(row, j);
                        if pij == 0.0 {
                            continue;
                        }
                        let d_logit = pij * (dp[j] - inner);
                        let d_dot = d_logit * scale;
                        let kj = &block.k.row(j)[off..off + dh];
                        for c in 0..dh {
                            d_q.data_mut()[i * d + off + c] += d_dot * kj[c];
                        }
                        if half && j < n {
                            let cur = d_aprime.at2(i, j);
                            d_aprime.set2(i, j, cur + d_logit * scale);
                        }
                    }
                }
            }

            // --- relative term backward ---
            if let (Some(rt), Some(p)) = (rma_tape, lp) {
                let glayer = grads.layers.get_mut(&layer_no).unwrap();
                let mut d_qm = Tensor::zeros(&[m * n, d]);
                let mut d_km = Tensor::zeros(&[n, d]);
                for i in 0..m {
                    for j in 0..n {
                        let da = d_aprime.at2(i, j);
                        if da == 0.0 {
                            continue;
                        }
                        let km_j = rt.km.row(j);
                        let qm_ij = rt.qm.row(i * n + j);
                        for c in 0..d {
                            d_qm.data_mut()[(i * n + j) * d + c] += da * km_j[c];
                            d_km.data_mut()[j * d + c] += da * qm_ij[c];
                        }
                    }
                }
                // projection weight gradients
                accumulate_linear_grads(
                    &d_qm,
                    &rt.t_mp,
                    &mut glayer.wqm,
                    &mut glayer.bqm,
                );
                let t_im = slice_rows(&block.y, 0, n);
                accumulate_linear_grads(&d_km, &t_im, &mut glayer.wkm, &mut glayer.bkm);
                // back through f2 into the pre-refinement mask
                let d_tmp = linear_backward_input(&d_qm, &p.wqm);
                let hpix = d_mask.shape()[1];
                let wpix = d_mask.shape()[2];
                for i in 0..m {
                    let mut d_conv = Tensor::zeros(&[d, g, g]);
                    for gy in 0..g {
                        for gx in 0..g {
                            let j = gy * g + gx;
                            for c in 0..d {
                                d_conv.data_mut()[(c * g + gy) * g + gx] =
                                    d_tmp.at2(i * n + j, c);
                            }
                        }
                    }
                    let mask_i = Tensor::from_vec(
                        &[1, hpix, wpix],
                        rt.mask_pre.data()[i * hw..(i + 1) * hw].to_vec(),
                    )?;
                    let (dk, db) =
                        conv2d_weight_grad(&mask_i, &d_conv, cfg.patch_size, cfg.patch_size, 0);
                    add_into(&mut glayer.f2_kernel, &dk);
                    for (a, b) in glayer.f2_bias.data_mut().iter_mut().zip(&db) {
                        *a += b;
                    }
                    let dmi = conv2d_input_grad(
                        &d_conv,
                        &p.f2_kernel,
                        hpix,
                        wpix,
                        cfg.patch_size,
                        0,
                    );
                    for (a, b) in d_mask_pre.data_mut()[i * hw..(i + 1) * hw]
                        .iter_mut()
                        .zip(dmi.data())
                    {
                        *a += b;
                    }
                }
            }

            // q -> pre-norm tokens
            let d_y = linear_backward_input(&d_q, &lw.wq);
            let x_in_m = slice_rows(&block.x_in, ms, m);
            let d_from_ln1 = layer_norm_backward_input(
                &d_y,
                &x_in_m,
                &lw.ln1_gamma,
                &block.ln1_means[ms..],
                &block.ln1_rstds[ms..],
            );
            for (a, b) in d_x_in.data_mut().iter_mut().zip(d_from_ln1.data()) {
                *a += b;
            }
        }

        d_xm = d_x_in;
        d_mask = d_mask_pre;
    }

    Ok(grads)
}

fn slice_rows(t: &Tensor, start: usize, count: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::from_vec(
        &[count, cols],
        t.data()[start * cols..(start + count) * cols].to_vec(),
    )
    .unwrap()
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

/// dW += dY^T X, db += column sums of dY, for y = x W^T + b.
fn accumulate_linear_grads(dy: &Tensor, x: &Tensor, dw: &mut Tensor, db: &mut Tensor) {
    let rows = dy.shape()[0];
    let dout = dy.shape()[1];
    let din = x.shape()[1];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xr = x.row(r);
        for o in 0..dout {
            let gy = dyr[o];
            if gy == 0.0 {
                continue;
            }
            db.data_mut()[o] += gy;
            for i in 0..din {
                dw.data_mut()[o * din + i] += gy * xr[i];
            }
        }
    }
}
