//! Mask class tokens: patch occupancy, the block attention-mask matrix, and
//! the single-pass forward that yields one partial/dense feature per mask.
//!
//! The attention mask follows the block layout
//!
//! ```text
//!   [ F_(N+1)x(N+1)              T_(N+1)xM ]
//!   [ M'_MxN       F_Mx1        T_MxM     ]
//! ```
//!
//! True = masked out. Image and class tokens never see the mask tokens, so
//! their outputs are unchanged by M (non-interference); mask tokens attend
//! only their occupied patches plus the class token.

use crate::error::{Error, Result};
use crate::rma;
use crate::tensor::{BoolMat, Tensor};
use crate::vit::{FrozenWeights, TokenSequence};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// M soft masks over an H x W pixel grid, values in [0, 1], plus the
/// binarization threshold used for patch occupancy.
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: Tensor,
    threshold: f64,
}

impl MaskSet {
    /// Validates value range and rejects masks that are empty after
    /// thresholding; an all-background feature would be meaningless and
    /// would hide proposer bugs.
    pub fn new(masks: Tensor, threshold: f64) -> Result<Self> {
        let (m, h, w) = match masks.shape() {
            [m, h, w] => (*m, *h, *w),
            s => return Err(Error::Shape(format!("MaskSet wants [M,H,W], got {s:?}"))),
        };
        if masks.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invalid("mask values must lie in [0,1]".into()));
        }
        for i in 0..m {
            let px = &masks.data()[i * h * w..(i + 1) * h * w];
            if !px.iter().any(|&v| v > threshold) {
                return Err(Error::EmptyMask { index: i });
            }
        }
        Ok(MaskSet { masks, threshold })
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn tensor(&self) -> &Tensor {
        &self.masks
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.masks.data()[i * hw..(i + 1) * hw]
    }

    /// Single mask as a [1, H, W] view for convolution.
    pub fn mask_tensor(&self, i: usize) -> Tensor {
        Tensor::from_vec(&[1, self.height(), self.width()], self.pixels(i).to_vec()).unwrap()
    }
}

/// Per-mask, per-patch masked-out flags (Eq. 2 polarity): entry (i, j) is
/// False iff mask i, binarized at its threshold, contains at least one
/// pixel inside patch j. A mask with zero attendable patches is an error.
pub fn patch_occupancy(masks: &MaskSet, patch_size: usize) -> Result<BoolMat> {
    let (m, h, w) = (masks.len(), masks.height(), masks.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "mask {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let gy = h / patch_size;
    let gx = w / patch_size;
    let n = gy * gx;
    let mut occ = BoolMat::filled(m, n, true);
    for i in 0..m {
        let px = masks.pixels(i);
        let mut any = false;
        for py in 0..gy {
            for pxi in 0..gx {
                'patch: for y in py * patch_size..(py + 1) * patch_size {
                    for x in pxi * patch_size..(pxi + 1) * patch_size {
                        if px[y * w + x] > masks.threshold() {
                            occ.set(i, py * gx + pxi, false);
                            any = true;
                            break 'patch;
                        }
                    }
                }
            }
        }
        if !any {
            return Err(Error::EmptyMask { index: i });
        }
    }
    Ok(occ)
}

/// Assemble the (N+1+M) x (N+1+M) boolean attention mask from the M x N
/// occupancy block. True = masked out.
pub fn build_attention_mask(n: usize, m: usize, occupancy: &BoolMat) -> Result<BoolMat> {
    if occupancy.rows != m || occupancy.cols != n {
        return Err(Error::Shape(format!(
            "occupancy {}x{} vs N={n}, M={m}",
            occupancy.rows, occupancy.cols
        )));
    }
    let t = n + 1 + m;
    let mut mask = BoolMat::filled(t, t, false);
    for i in 0..n + 1 {
        for j in n + 1..t {
            mask.set(i, j, true); // image/class rows never see mask tokens
        }
    }
    for i in 0..m {
        let row = n + 1 + i;
        for j in 0..n {
            mask.set(row, j, occupancy.get(i, j));
        }
        // class-token column stays attendable
        for j in n + 1..t {
            mask.set(row, j, true); // mask tokens do not attend each other or themselves
        }
    }
    Ok(mask)
}

/// Single-pass forward with M mask class tokens and no relative mask
/// attention: one projected, L2-normalized feature per mask, plus the
/// untouched class feature.
pub fn encode_with_mask_tokens(
    image: &Tensor,
    masks: &MaskSet,
    weights: &FrozenWeights,
) -> Result<(Tensor, Vec<f64>, TokenSequence)> {
    let out = rma::forward(image, masks, weights, None, false)?;
    Ok((out.mask_features, out.class_feature, out.tokens))
}
