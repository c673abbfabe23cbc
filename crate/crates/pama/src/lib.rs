//! Position-aware masked autoencoding for slide bags.
//!
//! A *slide bag* is an unordered set of patch feature vectors plus the integer
//! grid coordinates the patches were cut from. This crate models such bags
//! with a small set of learnable anchors that exchange information with the
//! patches through position-aware cross-attention (PACA), where attention
//! logits are biased by quantized anchor→patch distances and polar-angle
//! bins. Between blocks, each anchor's polar frame is re-oriented toward its
//! dominant attention direction (kernel re-orientation, KRO), which makes the
//! learned representation robust to global rotations of the slide.
//!
//! Pre-training is a masked autoencoder: most patches are hidden from the
//! encoder, and a lighter decoder must reconstruct their features from the
//! visible ones plus position information alone.
//!
//! Module map:
//!
//! - [`tensor`] — dense f64 tensors and tape-based reverse-mode autodiff
//! - [`gradcheck`] — central-difference gradient checking
//! - [`geometry`] — anchors (k-means over coordinates), distance buckets,
//!   polar bins, and the `.pamb` bag file format
//! - [`paca`] — the cross-attention block, kernel re-orientation, anchor
//!   dropout
//! - [`model`] — full encoder/decoder assembly, masking plans, losses
//! - [`training`] — AdamW, LR schedules, pre-train / fine-tune / probe loops
//! - [`metrics`] — accuracy, macro-F1, one-vs-rest AUC
//! - [`checkpoint`] — the `.pamc` checkpoint format
//! - [`synth`] — synthetic slide-bag generator with spatial-motif classes
//! - [`bench`] — multiply-accumulate cost measurement vs. a dense
//!   self-attention reference
//! - [`cli`] — the `pama` binary's subcommands
//!
//! Every runnable capability also has a worked example under `examples/`;
//! start with `examples/pretrain_small.rs`.

pub mod bench;
pub(crate) mod bytesio;
pub mod checkpoint;
pub mod cli;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod paca;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;
