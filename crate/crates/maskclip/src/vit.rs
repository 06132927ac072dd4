//! CLIP-style ViT visual encoder with pre-norm blocks, a class token,
//! learned positional embeddings, and multi-head attention that accepts an
//! external boolean attention mask.
//!
//! The backbone is frozen: [`FrozenWeights`] records a content hash at
//! construction so training runs can prove they never touched it.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{
    dot, gelu, l2_normalize, layer_norm, linear, masked_softmax, BoolMat, Tensor,
};

/// Geometry of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub out_dim: usize,
}

impl ViTConfig {
    /// Desk-scale default: 64x64 image, patch 8 (N = 64), D = 64, 4 heads,
    /// depth 8, projected width 32.
    pub fn toy() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            depth: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            out_dim: 32,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image tokens N.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Invalid(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm transformer block's parameters. Weight matrices are stored
/// [out, in] row-major.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Tensor,
    pub bq: Vec<f64>,
    pub wk: Tensor,
    pub bk: Vec<f64>,
    pub wv: Tensor,
    pub bv: Vec<f64>,
    pub wo: Tensor,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

/// Frozen backbone weights plus the content hash taken at construction.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub config: ViTConfig,
    pub patch_kernel: Tensor,
    pub patch_bias: Vec<f64>,
    /// N+1 rows: one per image token slot, last row for the class token.
    pub pos_embed: Tensor,
    pub class_embed: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Vec<f64>,
    pub final_ln_beta: Vec<f64>,
    /// [dim, out_dim] projection applied after the final layer norm.
    pub proj: Tensor,
    hash: [u8; 32],
}

impl FrozenWeights {
    pub fn new(
        config: ViTConfig,
        patch_kernel: Tensor,
        patch_bias: Vec<f64>,
        pos_embed: Tensor,
        class_embed: Vec<f64>,
        layers: Vec<LayerWeights>,
        final_ln_gamma: Vec<f64>,
        final_ln_beta: Vec<f64>,
        proj: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let mut w = FrozenWeights {
            config,
            patch_kernel,
            patch_bias,
            pos_embed,
            class_embed,
            layers,
            final_ln_gamma,
            final_ln_beta,
            proj,
            hash: [0; 32],
        };
        w.check_shapes()?;
        w.hash = w.content_hash();
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.dim;
        let n = c.n_patches();
        let want = |cond: bool, what: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Shape(format!("frozen weights: bad {what}")))
            }
        };
        want(
            self.patch_kernel.shape() == [d, 3, c.patch_size, c.patch_size],
            "patch kernel",
        )?;
        want(self.patch_bias.len() == d, "patch bias")?;
        want(self.pos_embed.shape() == [n + 1, d], "positional embeddings")?;
        want(self.class_embed.len() == d, "class embedding")?;
        want(self.layers.len() == c.depth, "layer count")?;
        for lw in &self.layers {
            want(lw.wq.shape() == [d, d], "wq")?;
            want(lw.w1.shape() == [c.mlp_dim(), d], "mlp w1")?;
            want(lw.w2.shape() == [d, c.mlp_dim()], "mlp w2")?;
        }
        want(self.proj.shape() == [d, c.out_dim], "projection")?;
        Ok(())
    }

    /// Seeded pseudo-random backbone; any frozen backbone satisfies the
    /// encoder invariants, so no pretrained download is needed.
    pub fn seeded(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let p = config.patch_size;
        let n = config.n_patches();
        let mlp = config.mlp_dim();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).unwrap();
            let count: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..count).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let patch_kernel = normal(&[d, 3, p, p], 1.0 / ((3 * p * p) as f64).sqrt(), &mut rng);
        let pos_embed = normal(&[n + 1, d], 0.02, &mut rng);
        let class_embed = normal(&[d], 0.02, &mut rng).data().to_vec();
        let attn_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.depth)
            .map(|_| LayerWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: normal(&[d, d], attn_std, &mut rng),
                bq: vec![0.0; d],
                wk: normal(&[d, d], attn_std, &mut rng),
                bk: vec![0.0; d],
                wv: normal(&[d, d], attn_std, &mut rng),
                bv: vec![0.0; d],
                wo: normal(&[d, d], attn_std, &mut rng),
                bo: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w1: normal(&[mlp, d], attn_std, &mut rng),
                b1: vec![0.0; mlp],
                w2: normal(&[d, mlp], 1.0 / (mlp as f64).sqrt(), &mut rng),
                b2: vec![0.0; d],
            })
            .collect();
        let proj = normal(&[d, config.out_dim], attn_std, &mut rng);
        FrozenWeights::new(
            config,
            patch_kernel,
            vec![0.0; d],
            pos_embed,
            class_embed,
            layers,
            vec![1.0; d],
            vec![0.0; d],
            proj,
        )
    }

    /// SHA-256 over every parameter tensor, in declaration order.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut eat = |s: &[f64]| {
            for v in s {
                h.update(v.to_le_bytes());
            }
        };
        eat(self.patch_kernel.data());
        eat(&self.patch_bias);
        eat(self.pos_embed.data());
        eat(&self.class_embed);
        for lw in &self.layers {
            eat(&lw.ln1_gamma);
            eat(&lw.ln1_beta);
            eat(lw.wq.data());
            eat(&lw.bq);
            eat(lw.wk.data());
            eat(&lw.bk);
            eat(lw.wv.data());
            eat(&lw.bv);
            eat(lw.wo.data());
            eat(&lw.bo);
            eat(&lw.ln2_gamma);
            eat(&lw.ln2_beta);
            eat(lw.w1.data());
            eat(&lw.b1);
            eat(lw.w2.data());
            eat(&lw.b2);
        }
        eat(&self.final_ln_gamma);
        eat(&self.final_ln_beta);
        eat(self.proj.data());
        h.finalize().into()
    }

    /// Hash recorded when the weights were constructed or loaded.
    pub fn recorded_hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn hash_unchanged(&self) -> bool {
        self.content_hash() == self.hash
    }
}

/// Ordered token embeddings: indices 0..N-1 image tokens, index N the class
/// token, indices N+1.. mask class tokens.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub n_image: usize,
    pub n_mask: usize,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.n_image + 1 + self.n_mask
    }

    pub fn class_row(&self) -> &[f64] {
        self.tokens.row(self.n_image)
    }

    pub fn mask_row(&self, i: usize) -> &[f64] {
        self.tokens.row(self.n_image + 1 + i)
    }
}

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of full encoder forward passes since the last reset. One joint
/// pass with M mask tokens counts once; the crop-and-encode baseline counts
/// once per mask.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::SeqCst)
}

pub fn reset_forward_pass_count() {
    FORWARD_PASSES.store(0, Ordering::SeqCst);
}

pub(crate) fn record_forward_pass() {
    FORWARD_PASSES.fetch_add(1, Ordering::SeqCst);
}

/// Patchify an image with the frozen strided convolution. Tokens are
/// flattened row-major over the patch grid; positional embeddings are added
/// by the caller.
pub fn patch_embed(image: &Tensor, weights: &FrozenWeights) -> Result<Tensor> {
    let c = &weights.config;
    let s = c.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::Shape(format!(
            "patch_embed wants [3,{s},{s}], got {:?}",
            image.shape()
        )));
    }
    let conv = crate::tensor::conv2d(
        image,
        &weights.patch_kernel,
        Some(&weights.patch_bias),
        c.patch_size,
        0,
    )?;
    let g = c.grid();
    let d = c.dim;
    let mut tokens = Tensor::zeros(&[c.n_patches(), d]);
    for y in 0..g {
        for x in 0..g {
            let t = y * g + x;
            for ch in 0..d {
                tokens.set2(t, ch, conv.at3(ch, y, x));
            }
        }
    }
    Ok(tokens)
}

/// Per-layer intermediates recorded for the hand-derived backward pass.
#[derive(Debug, Clone)]
pub struct BlockTape {
    pub x_in: Tensor,
    pub ln1_means: Vec<f64>,
    pub ln1_rstds: Vec<f64>,
    pub y: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Post-softmax attention per head, each [T, T].
    pub probs: Vec<Tensor>,
    pub x_mid: Tensor,
    pub ln2_means: Vec<f64>,
    pub ln2_rstds: Vec<f64>,
    pub z: Tensor,
    pub h_pre: Tensor,
}

/// How mask-token rows are scaled inside one block.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnOptions<'a> {
    /// Rows at and beyond this index are mask-token rows; None means all
    /// rows use the standard scaling.
    pub mask_row_start: Option<usize>,
    /// Halve the mask-row logit scale (the relative-attention convention).
    pub half_scale_mask_rows: bool,
    /// Relative term [M, N] added to mask-row logits over image columns
    /// before scaling.
    pub a_prime: Option<&'a Tensor>,
    pub n_image: usize,
}

/// One pre-norm block: norm, masked multi-head attention, residual, norm,
/// MLP, residual. `attn_mask` is boolean, True = masked out.
pub fn block_forward(
    x: &Tensor,
    attn_mask: &BoolMat,
    lw: &LayerWeights,
    heads: usize,
    opts: &AttnOptions,
    mut tape: Option<&mut BlockTape>,
) -> Result<Tensor> {
    let t = x.shape()[0];
    let d = x.shape()[1];
    if attn_mask.rows != t || attn_mask.cols != t {
        return Err(Error::Shape(format!(
            "attention mask {}x{} vs sequence length {t}",
            attn_mask.rows, attn_mask.cols
        )));
    }
    let dh = d / heads;
    let (y, ln1_means, ln1_rstds) = layer_norm(x, &lw.ln1_gamma, &lw.ln1_beta);
    let q = linear(&y, &lw.wq, &lw.bq)?;
    let k = linear(&y, &lw.wk, &lw.bk)?;
    let v = linear(&y, &lw.wv, &lw.bv)?;

    let base_scale = 1.0 / (dh as f64).sqrt();
    let half_scale = 1.0 / (2.0 * (dh as f64).sqrt());
    let mask_start = opts.mask_row_start.unwrap_or(t);

    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Tensor::zeros(&[t, d]);
    for h in 0..heads {
        let off = h * dh;
        let mut logits = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let qi = &q.row(i)[off..off + dh];
            let scale = if opts.half_scale_mask_rows && i >= mask_start {
                half_scale
            } else {
                base_scale
            };
            for j in 0..t {
                if attn_mask.get(i, j) {
                    continue;
                }
                let mut l = dot(qi, &k.row(j)[off..off + dh]);
                if i >= mask_start && j < opts.n_image {
                    if let Some(ap) = opts.a_prime {
                        l += ap.at2(i - mask_start, j);
                    }
                }
                logits.set2(i, j, l * scale);
            }
        }
        let p = masked_softmax(&logits, attn_mask)?;
        for i in 0..t {
            for j in 0..t {
                let pij = p.at2(i, j);
                if pij == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[off..off + dh];
                for c in 0..dh {
                    ctx.data_mut()[i * d + off + c] += pij * vj[c];
                }
            }
        }
        probs.push(p);
    }
    let attn_out = linear(&ctx, &lw.wo, &lw.bo)?;
    let mut x_mid = x.clone();
    for (a, b) in x_mid.data_mut().iter_mut().zip(attn_out.data()) {
        *a += b;
    }

    let (z, ln2_means, ln2_rstds) = layer_norm(&x_mid, &lw.ln2_gamma, &lw.ln2_beta);
    let h_pre = linear(&z, &lw.w1, &lw.b1)?;
    let mut act = h_pre.clone();
    for vmut in act.data_mut() {
        *vmut = gelu(*vmut);
    }
    let mlp_out = linear(&act, &lw.w2, &lw.b2)?;
    let mut x_out = x_mid.clone();
    for (a, b) in x_out.data_mut().iter_mut().zip(mlp_out.data()) {
        *a += b;
    }
    x_out.validate_finite("block_forward")?;

    if let Some(tp) = tape.as_deref_mut() {
        *tp = BlockTape {
            x_in: x.clone(),
            ln1_means,
            ln1_rstds,
            y,
            q,
            k,
            v,
            probs,
            x_mid,
            ln2_means,
            ln2_rstds,
            z,
            h_pre,
        };
    }
    Ok(x_out)
}

impl Default for BlockTape {
    fn default() -> Self {
        BlockTape {
            x_in: Tensor::zeros(&[0, 0]),
            ln1_means: vec![],
            ln1_rstds: vec![],
            y: Tensor::zeros(&[0, 0]),
            q: Tensor::zeros(&[0, 0]),
            k: Tensor::zeros(&[0, 0]),
            v: Tensor::zeros(&[0, 0]),
            probs: vec![],
            x_mid: Tensor::zeros(&[0, 0]),
            ln2_means: vec![],
            ln2_rstds: vec![],
            z: Tensor::zeros(&[0, 0]),
            h_pre: Tensor::zeros(&[0, 0]),
        }
    }
}

/// Standard pre-norm attention layer over a token sequence with an external
/// boolean attention mask.
pub fn attention_layer(
    seq: &TokenSequence,
    attn_mask: &BoolMat,
    lw: &LayerWeights,
    heads: usize,
) -> Result<TokenSequence> {
    let tokens = block_forward(
        &seq.tokens,
        attn_mask,
        lw,
        heads,
        &AttnOptions {
            n_image: seq.n_image,
            ..Default::default()
        },
        None,
    )?;
    Ok(TokenSequence {
        tokens,
        n_image: seq.n_image,
        n_mask: seq.n_mask,
    })
}

/// Final layer norm, projection, L2 normalization for one token row.
pub(crate) fn project_feature(row: &[f64], weights: &FrozenWeights) -> Vec<f64> {
    let d = weights.config.dim;
    let x = Tensor::from_vec(&[1, d], row.to_vec()).unwrap();
    let (f, _, _) = layer_norm(&x, &weights.final_ln_gamma, &weights.final_ln_beta);
    let out_dim = weights.config.out_dim;
    let mut out = vec![0.0; out_dim];
    for o in 0..out_dim {
        let mut acc = 0.0;
        for i in 0..d {
            acc += f.data()[i] * weights.proj.at2(i, o);
        }
        out[o] = acc;
    }
    l2_normalize(&mut out);
    out
}

/// Assemble the initial token sequence: patch-embedded image plus
/// positional embeddings, the class token, and M mask class tokens that
/// reuse the class embedding verbatim (no positional embedding).
pub(crate) fn initial_sequence(
    image: &Tensor,
    weights: &FrozenWeights,
    n_mask: usize,
) -> Result<TokenSequence> {
    let c = &weights.config;
    let n = c.n_patches();
    let d = c.dim;
    let img_tokens = patch_embed(image, weights)?;
    let mut tokens = Tensor::zeros(&[n + 1 + n_mask, d]);
    for i in 0..n {
        for j in 0..d {
            tokens.set2(i, j, img_tokens.at2(i, j) + weights.pos_embed.at2(i, j));
        }
    }
    for j in 0..d {
        tokens.set2(n, j, weights.class_embed[j] + weights.pos_embed.at2(n, j));
    }
    for m in 0..n_mask {
        for j in 0..d {
            tokens.set2(n + 1 + m, j, weights.class_embed[j]);
        }
    }
    Ok(TokenSequence {
        tokens,
        n_image: n,
        n_mask,
    })
}

/// Full forward pass with M = 0: the vanilla CLIP-style visual encoder.
/// Returns the L2-normalized projected class feature and the final tokens.
pub fn encode(image: &Tensor, weights: &FrozenWeights) -> Result<(Vec<f64>, TokenSequence)> {
    record_forward_pass();
    let c = &weights.config;
    let mut seq = initial_sequence(image, weights, 0)?;
    let t = seq.seq_len();
    let mask = BoolMat::filled(t, t, false);
    for lw in &weights.layers {
        seq = attention_layer(&seq, &mask, lw, c.heads)?;
    }
    let feature = project_feature(seq.class_row(), weights);
    Ok((feature, seq))
}
