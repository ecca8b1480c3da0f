//! modeforge: an RF fingerprinting toolkit built around a closed-form,
//! reconstruction-exact variational mode decomposition.
//!
//! The crate is organized as a stack:
//!
//! - [`signal`] — complex sample containers and forward/inverse DFT.
//! - [`vmd`] — the closed-form lossless decomposition, center-index
//!   selection, and the classic ADMM baseline it is benchmarked against.
//! - [`tensor`] — a dense f64 tensor engine with reverse-mode autodiff,
//!   sized for desk-scale training with finite-difference-verified
//!   gradients.
//! - [`model`] — the dual-mode classifier: a convolutional front end
//!   (CFRE) feeding either a transformer encoder (TDSE) or a selective
//!   state-space encoder (MLFE), plus the closed-set linear head.
//! - [`openset`] — temperature-scaled softmax thresholding for
//!   legal/illegal device decisions and the (temperature, threshold)
//!   sweep.
//! - [`data`] — synthetic transmitter-fleet generation, stratified
//!   splits, VMD preprocessing, and the `RFIQ` container format.

pub mod data;
pub mod model;
pub mod openset;
pub mod signal;
pub mod tensor;
pub mod vmd;
