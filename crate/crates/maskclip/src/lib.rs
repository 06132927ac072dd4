//! Open-vocabulary panoptic segmentation building blocks: a frozen
//! CLIP-style ViT extended with mask class tokens and relative mask
//! attention, plus the crop-and-encode baseline, training losses,
//! segmentation metrics, and an analytic FLOPs model.

pub mod error;
pub mod eval;
pub mod io;
pub mod mask_tokens;
pub mod pipeline;
pub mod rma;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vit;

pub use error::{Error, Result};

// Keep the guide's code samples compiling: every chapter is run as a
// doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/mask-tokens.md")]
    mod mask_tokens {}
    #[doc = include_str!("../../../book/src/relative-attention.md")]
    mod relative_attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
